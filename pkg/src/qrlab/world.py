"""Seeded synthetic retrieval world with a known-good rewrite for every query.

Documents are written in a canonical register; queries use surface synonyms
that never occur in any document. The lexical retriever therefore cannot
bridge a raw query to its answer-bearing document, while the gold rewrite
(surface terms mapped to canonical ones) can. Each entity also has several
short stub pages that soak up entity-only matches.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .corpus import Document, save_documents
from .reranker import RewriteRecord

DEFAULT_RELATIONS = {
    "recipient": "winner",
    "seat": "capital",
    "originator": "founder",
    "tallness": "height",
    "penman": "author",
    "helmsman": "leader",
}
DEFAULT_TYPES = {
    "firm": "company",
    "nation": "country",
    "tune": "song",
    "tome": "book",
    "squad": "team",
}
QUERY_TEMPLATES = (
    "who is the {rel} of the {type} {ent}",
    "{type} {ent} {rel} name",
    "tell me the {rel} of {ent} {type}",
    "what {rel} does {type} {ent} have",
    "{ent} {type} {rel}",
)

_CONS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


@dataclass
class WorldSpec:
    seed: int = 0
    n_documents: int = 200
    n_queries: int = 200
    relations_per_entity: int = 5
    supports_per_fact: int = 3
    stubs_per_entity: int = 5
    relation_mentions: int = 1
    type_mentions: int = 0
    n_common_words: int = 8
    common_per_doc: int = 5
    n_rare_words: int = 60
    rare_per_stub: int = 6
    answer_plant_rate: float = 0.0
    n_answer_words: int | None = 10
    relation_map: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_RELATIONS))
    type_map: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_TYPES))

    @property
    def obfuscation_map(self) -> dict[str, str]:
        return {**self.relation_map, **self.type_map}


@dataclass
class QueryRecord:
    query_id: str
    question: str
    answers: list[str]
    is_false_premise: bool = False

    def __post_init__(self):
        if not self.answers and not self.is_false_premise:
            raise ValueError(f"query {self.query_id!r} has no answers")


@dataclass
class World:
    spec: WorldSpec
    documents: list[Document]
    queries: list[QueryRecord]
    gold_rewrites: dict[str, str]

    def digest(self) -> str:
        h = hashlib.sha256()
        for d in self.documents:
            h.update(json.dumps([d.doc_id, d.title, d.body]).encode())
        for q in self.queries:
            h.update(json.dumps([q.query_id, q.question, q.answers, self.gold_rewrites[q.query_id]]).encode())
        return h.hexdigest()

    def texts(self) -> list[str]:
        return [d.text for d in self.documents] + [q.question for q in self.queries] + list(self.gold_rewrites.values())


def _pseudo_words(rng: random.Random, n: int, syllables: int, taken: set[str]) -> list[str]:
    out: list[str] = []
    while len(out) < n:
        w = "".join(rng.choice(_CONS) + rng.choice(_VOWELS) for _ in range(syllables))
        if w in taken:
            continue
        # answers are matched by substring, so no word may contain another
        if any(w in t or t in w for t in taken):
            continue
        taken.add(w)
        out.append(w)
    return out


def apply_map(text: str, mapping: dict[str, str]) -> str:
    return " ".join(mapping.get(t, t) for t in text.split())


def gen_synthetic_world(spec: WorldSpec) -> World:
    """Build documents, queries and gold rewrites deterministically from ``spec``.

    Per entity: ``supports_per_fact`` answer pages for each of its relations
    (entity, canonical relation, answer, common padding words, plus
    ``type_mentions`` copies of the canonical type word) and
    ``stubs_per_entity`` short pages holding the entity plus rare words. With
    the default ``type_mentions=0`` no page names a type, so mapping a type
    word changes nothing for the retriever.
    """
    if not spec.relation_map or not spec.type_map:
        raise ValueError("obfuscation map must be nonempty")
    if spec.n_documents < 1 or spec.n_queries < 1:
        raise ValueError("n_documents and n_queries must be >= 1")
    if spec.n_answer_words is not None and spec.n_answer_words < spec.relations_per_entity:
        raise ValueError("n_answer_words must cover relations_per_entity")
    if spec.relations_per_entity > len(spec.relation_map):
        raise ValueError("relations_per_entity exceeds the number of mapped relations")
    per_entity = spec.relations_per_entity * spec.supports_per_fact + spec.stubs_per_entity
    n_entities = max(1, spec.n_documents // per_entity)
    rng = random.Random(spec.seed)

    taken = set(spec.obfuscation_map) | set(spec.obfuscation_map.values())
    taken |= {w for t in QUERY_TEMPLATES for w in t.split() if not w.startswith("{")}
    entities = _pseudo_words(rng, n_entities, 3, taken)
    common = _pseudo_words(rng, spec.n_common_words, 2, taken)
    rare = _pseudo_words(rng, spec.n_rare_words, 2, taken)
    answer_pool = _pseudo_words(rng, spec.n_answer_words, 3, taken) if spec.n_answer_words else None
    relations = sorted(spec.relation_map)
    types = sorted(spec.type_map)

    docs: list[Document] = []
    facts = []  # (entity, type_surface, relation_surface, answer, support doc indices)
    for e_i, ent in enumerate(entities):
        tsurf = types[e_i % len(types)]
        tcanon = spec.type_map[tsurf]
        rels = sorted(rng.sample(relations, spec.relations_per_entity))
        if answer_pool is None:
            answers = _pseudo_words(rng, len(rels), 3, taken)
        else:
            answers = rng.sample(answer_pool, len(rels))
        for rsurf, ans in zip(rels, answers):
            idxs = []
            for _ in range(spec.supports_per_fact):
                body = [tcanon] * spec.type_mentions + [ent] + [spec.relation_map[rsurf]] * spec.relation_mentions + [ans]
                body += rng.sample(common, spec.common_per_doc)
                idxs.append(len(docs))
                docs.append(Document(f"d{len(docs):04d}", ent, " ".join(body)))
            facts.append((ent, tsurf, rsurf, ans, idxs))
        for _ in range(spec.stubs_per_entity):
            body = [ent] + rng.sample(rare, spec.rare_per_stub)
            docs.append(Document(f"d{len(docs):04d}", ent, " ".join(body)))
    while len(docs) < spec.n_documents:
        docs.append(Document(f"d{len(docs):04d}", rng.choice(rare), " ".join(rng.sample(common, 3))))

    # cross-reference plants: an answer also appears on a sibling fact's page
    bodies = [d.body for d in docs]
    for ent, _, _, ans, own in facts:
        if rng.random() < spec.answer_plant_rate:
            sibs = [i for f in facts if f[0] == ent and f[4] != own for i in f[4]]
            if sibs:
                j = rng.choice(sibs)
                bodies[j] = f"{bodies[j]} {ans}"
    docs = [Document(d.doc_id, d.title, b) for d, b in zip(docs, bodies)]

    order = list(range(len(facts)))
    rng.shuffle(order)
    queries, gold = [], {}
    seen_text: set[str] = set()
    qi = 0
    for rnd in range(len(QUERY_TEMPLATES)):
        for fi in order:
            if qi == spec.n_queries:
                break
            ent, tsurf, rsurf, ans, _ = facts[fi]
            tmpl = QUERY_TEMPLATES[(fi + rnd) % len(QUERY_TEMPLATES)]
            text = tmpl.format(rel=rsurf, type=tsurf, ent=ent)
            if text in seen_text:
                continue
            seen_text.add(text)
            qid = f"q{qi:04d}"
            queries.append(QueryRecord(qid, text, [ans]))
            gold[qid] = apply_map(text, spec.obfuscation_map)
            qi += 1
    if qi < spec.n_queries:
        raise ValueError(f"world supports only {qi} distinct queries; raise n_documents or lower n_queries")
    return World(spec, docs, queries, gold)


# -- teacher -----------------------------------------------------------------


def world_thesaurus(world: World, n_distractors: int = 20, seed: int = 0) -> dict[str, str]:
    """Synonym pairs for base-model pre-training: the world's map plus random decoys.

    The decoys keep the base model from treating "has a thesaurus entry" as
    the signal for "should be rewritten".
    """
    mapping = world.spec.obfuscation_map
    used = set(mapping) | set(mapping.values())
    pool = sorted({t for text in world.texts() for t in text.split()} - used)
    if 2 * n_distractors > len(pool):
        raise ValueError(f"need {2 * n_distractors} decoy words, world has {len(pool)}")
    rng = random.Random(seed)
    picks = rng.sample(pool, 2 * n_distractors)
    out = dict(mapping)
    out.update(zip(picks[:n_distractors], picks[n_distractors:]))
    return out


def _synthetic_variants(query: str, gold: str, mapping: dict[str, str], fillers: Sequence[str],
                        entities: Sequence[str], entity_of: Callable[[str], str | None],
                        rng: random.Random) -> list[str]:
    """Teacher candidates in priority order: gold, identity, partial map, wrong
    entity, dropped entity, inserted filler word."""
    toks = query.split()
    mapped = [i for i, t in enumerate(toks) if t in mapping]
    variants = [gold, query]
    if len(mapped) >= 2:
        keep = rng.choice(mapped)
        variants.append(" ".join(mapping[t] if i == keep else t for i, t in enumerate(toks)))
    ent = entity_of(query)
    others = [e for e in entities if e != ent]
    if ent and others:
        wrong = rng.choice(others)
        variants.append(" ".join(wrong if t == ent else t for t in gold.split()))
    noised = [t for t in gold.split() if t != ent] if ent else gold.split()[:-1]
    if noised:
        variants.append(" ".join(noised))
    if fillers:
        gtoks = gold.split()
        pos = rng.randrange(len(gtoks) + 1)
        variants.append(" ".join(gtoks[:pos] + [rng.choice(list(fillers))] + gtoks[pos:]))
    return variants


class CompletionAdapter:
    """Text-completion interface for an external rewrite teacher."""

    def complete(self, prompt: str, n: int) -> list[str]:  # pragma: no cover - interface
        raise NotImplementedError


class MockCompletionAdapter(CompletionAdapter):
    """Returns canned rewrites keyed by the query embedded in the prompt."""

    def __init__(self, fixtures: dict[str, list[str]]):
        self.fixtures = fixtures
        self.prompts: list[str] = []

    def complete(self, prompt: str, n: int) -> list[str]:
        self.prompts.append(prompt)
        query = prompt.split("Query: ", 1)[1].rsplit("\n\nOutput:", 1)[0]
        return list(self.fixtures.get(query, []))[:n]


def teacher_rewrites(queries: Sequence[QueryRecord], n_per_query: int = 4, mode: str = "synthetic",
                     world: World | None = None, adapter: CompletionAdapter | None = None,
                     seed: int = 0) -> list[RewriteRecord]:
    """Produce teacher rewrites for every query (unsplit)."""
    if n_per_query < 1:
        raise ValueError("n_per_query must be >= 1")
    records: list[RewriteRecord] = []
    if mode == "external":
        if adapter is None:
            raise ValueError("external teacher mode needs a completion adapter; use mode='synthetic' instead")
        from .policy import render_prompt

        for q in queries:
            seen: list[str] = []
            for r in adapter.complete(render_prompt(q.question), n_per_query):
                r = r.strip()
                if r and r not in seen:
                    seen.append(r)
            records.extend(RewriteRecord(q.query_id, q.question, r, "teacher") for r in seen)
        return records
    if mode != "synthetic":
        raise ValueError(f"unknown teacher mode {mode!r}")
    if world is None:
        raise ValueError("synthetic teacher mode needs the world it rewrites for")
    rng = random.Random(seed)
    mapping = world.spec.obfuscation_map
    entity_titles = {d.title for d in world.documents}
    entities = sorted({q.question.split()[i] for q in world.queries for i in range(len(q.question.split()))
                       if q.question.split()[i] in entity_titles})
    fillers = sorted({w for d in world.documents for w in d.body.split()} - entity_titles
                     - set(mapping.values()) - {a for q in world.queries for a in q.answers})

    def entity_of(text: str) -> str | None:
        return next((t for t in text.split() if t in entity_titles), None)

    for q in queries:
        variants = _synthetic_variants(q.question, world.gold_rewrites[q.query_id], mapping, fillers,
                                       entities, entity_of, rng)
        seen = []
        for v in variants:
            if v and v not in seen:
                seen.append(v)
        records.extend(RewriteRecord(q.query_id, q.question, v, "teacher") for v in seen[:n_per_query])
    return records


def split_dataset(records: Sequence[RewriteRecord], sft_fraction: float = 0.5,
                  seed: int = 0) -> dict[str, str]:
    """Assign each query id to 'sft' or 'feedback' after a seeded shuffle of query ids."""
    if not 0 < sft_fraction < 1:
        raise ValueError("sft_fraction must lie in (0, 1)")
    qids = sorted({r.query_id for r in records})
    n_sft = round(len(qids) * sft_fraction)
    if n_sft < 1 or n_sft >= len(qids):
        raise ValueError(f"{len(qids)} queries cannot fill both splits at fraction {sft_fraction}")
    rng = random.Random(seed)
    rng.shuffle(qids)
    return {q: ("sft" if i < n_sft else "feedback") for i, q in enumerate(qids)}


# -- persistence -------------------------------------------------------------


def save_queries(queries: Sequence[QueryRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in queries:
            fh.write(json.dumps(asdict(q), ensure_ascii=False, sort_keys=True) + "\n")


def load_queries(path: str | Path) -> list[QueryRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                o = json.loads(line)
                out.append(QueryRecord(o["query_id"], o["question"], list(o.get("answers", [])),
                                       bool(o.get("is_false_premise", False))))
    return out


def save_world(world: World, directory: str | Path) -> dict[str, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"documents": d / "documents.jsonl", "queries": d / "queries.jsonl",
             "gold": d / "gold_rewrites.jsonl", "world": d / "world.json"}
    save_documents(world.documents, paths["documents"])
    save_queries(world.queries, paths["queries"])
    with open(paths["gold"], "w", encoding="utf-8") as fh:
        for qid in sorted(world.gold_rewrites):
            fh.write(json.dumps({"query_id": qid, "rewrite": world.gold_rewrites[qid]}, sort_keys=True) + "\n")
    paths["world"].write_text(json.dumps({"spec": asdict(world.spec), "digest": world.digest()},
                                         indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths


def load_world(directory: str | Path) -> World:
    from .corpus import load_documents

    d = Path(directory)
    meta = json.loads((d / "world.json").read_text(encoding="utf-8"))
    gold = {}
    with open(d / "gold_rewrites.jsonl", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                o = json.loads(line)
                gold[o["query_id"]] = o["rewrite"]
    return World(WorldSpec(**meta["spec"]), load_documents(d / "documents.jsonl"),
                 load_queries(d / "queries.jsonl"), gold)
