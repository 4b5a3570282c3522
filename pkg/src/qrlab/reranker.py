"""Reranker feedback: pair scoring, rewrite scores, the good/bad threshold and
preference-data construction."""

from __future__ import annotations

import json
import math
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from itertools import product
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

from .corpus import Document, RetrievedEntry, RetrievedList, SearchIndex, retrieve_documents, tokenize_text
from .metrics import precision_at_k

PROVENANCES = ("teacher", "sft_model", "feedback_model")
GOOD, BAD = "good", "bad"


class EmptyTextWarning(UserWarning):
    """A query or document had no tokens; its pair score defaults to 0."""


class Scorer(Protocol):
    def score(self, query: str, document: Document) -> float: ...


class TfidfScorer:
    """Cosine similarity between TF-IDF vectors, IDF taken from a search index.

    Terms the index has never seen carry no weight, as with a vectorizer
    fitted on the corpus.

    ``synonyms`` maps surface tokens onto canonical ones before weighting. It
    lets a lexical scorer stand in for a reranker that understands paraphrase;
    leave it empty for the plain lexical scorer.
    """

    def __init__(self, index: SearchIndex, synonyms: Mapping[str, str] | None = None):
        self.index = index
        self.synonyms = dict(synonyms or {})
        self._idf_cache: dict[str, float] = {}

    def _idf(self, term: str) -> float:
        v = self._idf_cache.get(term)
        if v is None:
            v = self._idf_cache[term] = self.index.idf(term)
        return v

    def vector(self, text: str) -> dict[str, float]:
        toks = [self.synonyms.get(t, t) for t in tokenize_text(text)]
        return {t: tf * self._idf(t) for t, tf in Counter(toks).items() if t in self.index.vocabulary}

    def score(self, query: str, document: Document) -> float:
        qv = self.vector(query)
        dv = self.vector(document.text)
        if not qv or not dv:
            warnings.warn("empty query or document in pair scoring", EmptyTextWarning, stacklevel=2)
            return 0.0
        dot = sum(w * dv.get(t, 0.0) for t, w in qv.items())
        norm = math.sqrt(sum(w * w for w in qv.values())) * math.sqrt(sum(w * w for w in dv.values()))
        if norm == 0.0:
            return 0.0
        return min(1.0, max(0.0, dot / norm))


class ScaledScorer:
    """Wraps a scorer and multiplies its output by a constant (used in invariance checks)."""

    def __init__(self, base: Scorer, factor: float):
        self.base, self.factor = base, factor

    def score(self, query: str, document: Document) -> float:
        return self.factor * self.base.score(query, document)


class CallableScorer:
    """Adapter slot for an external reranker exposed as ``fn(query, text) -> float``."""

    def __init__(self, fn: Callable[[str, str], float]):
        self.fn = fn

    def score(self, query: str, document: Document) -> float:
        v = float(self.fn(query, document.text))
        if not math.isfinite(v):
            raise ValueError(f"external scorer returned non-finite value {v}")
        return v


def score_pair(scorer: Scorer, query: str, document: Document) -> float:
    return scorer.score(query, document)


@dataclass(frozen=True)
class RewriteScore:
    value: float
    empty_retrieval: bool = False
    doc_ids: tuple[str, ...] = ()


def score_rewrite(original_query: str, rewrite: str, index: SearchIndex, scorer: Scorer,
                  k: int = 10) -> RewriteScore:
    """Mean reranker score of the original query over the rewrite's top-k documents."""
    if k < 1:
        raise ValueError("k must be >= 1")
    docs = retrieve_documents(index, rewrite, k)
    if not docs:
        return RewriteScore(0.0, True)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyTextWarning)
        vals = [scorer.score(original_query, d) for d in docs]
    return RewriteScore(math.fsum(vals) / len(vals), False, tuple(d.doc_id for d in docs))


@dataclass
class RewriteRecord:
    query_id: str
    original_query: str
    rewrite: str
    provenance: str = "teacher"
    score: float | None = None
    label: str | None = None

    def __post_init__(self):
        if not self.rewrite or not self.rewrite.strip():
            raise ValueError(f"empty rewrite for query {self.query_id!r}")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.label not in (None, GOOD, BAD):
            raise ValueError(f"unknown label {self.label!r}")
        if self.label is not None and self.score is None:
            raise ValueError("labeled record must carry a score")


@dataclass(frozen=True)
class PreferencePair:
    query_id: str
    original_query: str
    good_rewrite: str
    bad_rewrite: str
    good_score: float
    bad_score: float


@dataclass
class FeedbackDataset:
    mu: float
    pairs: list[PreferencePair] = field(default_factory=list)
    kto_examples: list[RewriteRecord] = field(default_factory=list)

    @property
    def n_good(self) -> int:
        return sum(r.label == GOOD for r in self.kto_examples)

    @property
    def n_bad(self) -> int:
        return sum(r.label == BAD for r in self.kto_examples)


def score_records(records: Iterable[RewriteRecord], index: SearchIndex, scorer: Scorer,
                  k: int = 10) -> list[RewriteRecord]:
    out = []
    for r in records:
        s = score_rewrite(r.original_query, r.rewrite, index, scorer, k)
        out.append(replace(r, score=s.value))
    return out


def compute_threshold(records: Sequence[RewriteRecord]) -> float:
    """Flat mean of rewrite scores over every (query, rewrite) record."""
    if not records:
        raise ValueError("cannot compute a threshold over zero records")
    scores = []
    for r in records:
        if r.score is None:
            raise ValueError(f"record for query {r.query_id!r} is unscored")
        scores.append(r.score)
    return math.fsum(scores) / len(scores)


def label_rewrites(records: Sequence[RewriteRecord], mu: float) -> list[RewriteRecord]:
    """good iff score strictly exceeds mu."""
    out = []
    for r in records:
        if r.score is None:
            raise ValueError(f"record for query {r.query_id!r} is unscored")
        out.append(replace(r, label=GOOD if r.score > mu else BAD))
    return out


def _group(records: Iterable[RewriteRecord]) -> dict[str, list[RewriteRecord]]:
    groups: dict[str, list[RewriteRecord]] = {}
    for r in records:
        groups.setdefault(r.query_id, []).append(r)
    return groups


def build_preference_pairs(records: Sequence[RewriteRecord], mu: float,
                           max_pairs_per_query: int = 4) -> FeedbackDataset:
    """Cross good x bad within each query, keeping the largest score gaps."""
    for r in records:
        if r.label is None:
            raise ValueError(f"record for query {r.query_id!r} is unlabeled")
    pairs: list[PreferencePair] = []
    for qid, group in _group(records).items():
        goods = [r for r in group if r.label == GOOD]
        bads = [r for r in group if r.label == BAD]
        cands = [
            (g.score - b.score, i, j, g, b)
            for (i, g), (j, b) in product(enumerate(goods), enumerate(bads))
            if g.rewrite != b.rewrite
        ]
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        for _, _, _, g, b in cands[:max_pairs_per_query]:
            pairs.append(PreferencePair(qid, g.original_query, g.rewrite, b.rewrite, g.score, b.score))
    return FeedbackDataset(mu=mu, pairs=pairs, kto_examples=list(records))


def build_feedback_dataset(records: Sequence[RewriteRecord], index: SearchIndex, scorer: Scorer,
                           k: int = 10, max_pairs_per_query: int = 4) -> FeedbackDataset:
    scored = score_records(records, index, scorer, k)
    mu = compute_threshold(scored)
    return build_preference_pairs(label_rewrites(scored, mu), mu, max_pairs_per_query)


def rank_documents(original_query: str, documents: Sequence[Document], scorer: Scorer) -> RetrievedList:
    unique: dict[str, Document] = {}
    for d in documents:
        unique.setdefault(d.doc_id, d)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyTextWarning)
        scored = [(scorer.score(original_query, d), d.doc_id) for d in unique.values()]
    scored.sort(key=lambda t: (-t[0], t[1]))
    entries = [RetrievedEntry(doc_id, s, rank) for rank, (s, doc_id) in enumerate(scored, start=1)]
    return RetrievedList(original_query, entries)


def precision_feedback_labels(records: Sequence[RewriteRecord], index: SearchIndex,
                              answers: Mapping[str, Sequence[str]], k: int = 5) -> list[RewriteRecord]:
    """Label a rewrite good iff its Prec@k beats the original query's Prec@k.

    The record score becomes the rewrite's Prec@k.
    """
    base_cache: dict[str, float] = {}
    out = []
    for r in records:
        if r.query_id not in answers or not answers[r.query_id]:
            raise ValueError(f"no gold answers for query {r.query_id!r}")
        gold = answers[r.query_id]
        if r.query_id not in base_cache:
            base_cache[r.query_id] = precision_at_k(retrieve_documents(index, r.original_query, k), gold, k)
        p = precision_at_k(retrieve_documents(index, r.rewrite, k), gold, k)
        out.append(replace(r, score=p, label=GOOD if p > base_cache[r.query_id] else BAD))
    return out


# -- persistence -------------------------------------------------------------


def save_records(records: Iterable[RewriteRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r), ensure_ascii=False, sort_keys=True) + "\n")


def load_records(path: str | Path) -> list[RewriteRecord]:
    with open(path, encoding="utf-8") as fh:
        return [RewriteRecord(**json.loads(line)) for line in fh if line.strip()]


def save_feedback_dataset(ds: FeedbackDataset, directory: str | Path) -> dict[str, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"pairs": d / "pairs.jsonl", "kto": d / "kto.jsonl", "meta": d / "meta.json"}
    with open(paths["pairs"], "w", encoding="utf-8") as fh:
        for p in ds.pairs:
            fh.write(json.dumps({"query_id": p.query_id, "query": p.original_query, "good": p.good_rewrite,
                                 "bad": p.bad_rewrite, "good_score": p.good_score, "bad_score": p.bad_score},
                                ensure_ascii=False, sort_keys=True) + "\n")
    with open(paths["kto"], "w", encoding="utf-8") as fh:
        for r in ds.kto_examples:
            fh.write(json.dumps({"query_id": r.query_id, "query": r.original_query, "rewrite": r.rewrite,
                                 "score": r.score, "label": r.label, "provenance": r.provenance},
                                ensure_ascii=False, sort_keys=True) + "\n")
    meta = {"mu": ds.mu, "n_pairs": len(ds.pairs), "n_good": ds.n_good, "n_bad": ds.n_bad}
    paths["meta"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths


def load_feedback_dataset(directory: str | Path) -> FeedbackDataset:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text(encoding="utf-8"))
    pairs, kto = [], []
    with open(d / "pairs.jsonl", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                o = json.loads(line)
                pairs.append(PreferencePair(o["query_id"], o["query"], o["good"], o["bad"],
                                            o["good_score"], o["bad_score"]))
    with open(d / "kto.jsonl", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                o = json.loads(line)
                kto.append(RewriteRecord(o["query_id"], o["query"], o["rewrite"],
                                         o.get("provenance", "teacher"), o["score"], o["label"]))
    return FeedbackDataset(mu=meta["mu"], pairs=pairs, kto_examples=kto)
