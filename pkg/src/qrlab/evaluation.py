"""Retrieval-augmentation contexts (substitute / expand / oqr, raw / ranked) and
the QA and retrieval metrics computed over them.

Answers come from an extractive oracle, so end-to-end QA accuracy is a
deterministic function of which documents land in the context.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from .corpus import Document, SearchIndex, retrieve_documents
from .metrics import contains_answer, exact_match, mrr, normalize_answer, precision_at_k, rouge_l
from .policy import GenerationConfig, PolicyCheckpoint, sample_rewrites
from .reranker import Scorer, rank_documents
from .world import QueryRecord

MODES = ("substitute", "expand", "oqr")
ORDERS = ("raw", "ranked")
UNKNOWN = "unknown"
METRICS = ("em", "rouge_l", "prec@k", "prec@2k", "mrr")


@dataclass(frozen=True)
class EvalSetting:
    mode: str = "expand"
    order: str = "raw"
    k: int = 5
    num_rewrites: int = 2

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.order not in ORDERS:
            raise ValueError(f"order must be one of {ORDERS}, got {self.order!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.mode == "expand" and self.num_rewrites < 1:
            raise ValueError("expand needs num_rewrites >= 1")

    @property
    def rewrites_needed(self) -> int:
        return {"oqr": 0, "substitute": 1}.get(self.mode, self.num_rewrites)

    @property
    def name(self) -> str:
        if self.mode == "oqr":
            return f"oqr-{self.order}"
        return f"{self.mode}-{self.order}"


@dataclass(frozen=True)
class Context:
    documents: tuple[Document, ...]
    empty: bool = False

    @property
    def doc_ids(self) -> list[str]:
        return [d.doc_id for d in self.documents]


def _round_robin(lists: Sequence[Sequence[Document]], k: int) -> list[Document]:
    out: list[Document] = []
    seen: set[str] = set()
    pos = [0] * len(lists)
    while len(out) < k:
        moved = False
        for i, lst in enumerate(lists):
            # skip duplicates within this list's turn until a fresh doc or exhaustion
            while pos[i] < len(lst) and lst[pos[i]].doc_id in seen:
                pos[i] += 1
            if pos[i] < len(lst):
                d = lst[pos[i]]
                pos[i] += 1
                seen.add(d.doc_id)
                out.append(d)
                moved = True
                if len(out) == k:
                    break
        if not moved:
            break
    return out


def assemble_context(setting: EvalSetting, original_docs: Sequence[Document],
                     rewrite_docs: Sequence[Sequence[Document]], scorer: Scorer | None,
                     original_query: str, k: int | None = None) -> Context:
    """Order the top-k context documents for one query.

    ``original_docs`` is D (the original query's retrieval); ``rewrite_docs``
    holds D'_0, D'_1, ... in rewrite order. ``k`` defaults to ``setting.k``.
    """
    k = setting.k if k is None else k
    if setting.mode == "oqr":
        lists = [list(original_docs)]
    elif setting.mode == "substitute":
        if len(rewrite_docs) != 1:
            raise ValueError(f"substitute uses exactly one rewrite list, got {len(rewrite_docs)}")
        lists = [list(rewrite_docs[0])]
    else:
        lists = [list(original_docs)] + [list(r) for r in rewrite_docs]
    if not any(lists):
        return Context((), True)
    if setting.order == "raw":
        docs = _round_robin(lists, k)
    else:
        if scorer is None:
            raise ValueError("ranked order needs a scorer")
        pool = {d.doc_id: d for lst in lists for d in lst}
        ranked = rank_documents(original_query, list(pool.values()), scorer)
        docs = [pool[e.doc_id] for e in ranked.entries[:k]]
    return Context(tuple(docs), False)


def oracle_answer(docs: Sequence[Document], answers: Sequence[str]) -> str:
    """First gold answer found in the context, scanning documents in order."""
    for d in docs:
        for a in answers:
            if normalize_answer(a) and contains_answer(d, [a]):
                return a
    return UNKNOWN


@dataclass
class EvalReport:
    setting: dict
    metrics: dict[str, float]
    rows: list[dict] = field(default_factory=list)
    label: str = ""

    def to_json(self) -> str:
        payload = {"label": self.label, "setting": self.setting, "metrics": self.metrics, "rows": self.rows}
        return json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["query_id", "question", "rewrites", "doc_ids", "prediction", "is_false_premise", *METRICS]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow([r["query_id"], r["question"], " || ".join(r["rewrites"]), " ".join(r["doc_ids"]),
                        r["prediction"], int(r["is_false_premise"]), *(repr(r[m]) for m in METRICS)])
        return buf.getvalue()

    def save(self, path: str | Path) -> tuple[Path, Path]:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        csv_path = path.with_suffix(".csv")
        csv_path.write_text(self.to_csv(), encoding="utf-8")
        return path, csv_path

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        o = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(o["setting"], o["metrics"], o["rows"], o.get("label", ""))


def _query_row(q: QueryRecord, rewrites: list[str], ctx: Context, ctx2k: Context, k: int) -> dict:
    docs = list(ctx.documents)
    pred = oracle_answer(docs, q.answers)
    if q.is_false_premise:
        # false-premise items: the answer list holds the reference rebuttal(s)
        em = exact_match(pred, q.answers) if q.answers else 0
        prec, prec2, rr = 0.0, 0.0, 0.0
    else:
        em = exact_match(pred, q.answers)
        prec = precision_at_k(docs, q.answers, k)
        prec2 = precision_at_k(list(ctx2k.documents), q.answers, 2 * k)
        rr = mrr(docs, q.answers)
    return {
        "query_id": q.query_id,
        "question": q.question,
        "rewrites": rewrites,
        "doc_ids": ctx.doc_ids,
        "prediction": pred,
        "is_false_premise": q.is_false_premise,
        "empty_context": ctx.empty,
        "em": float(em),
        "rouge_l": rouge_l(pred, q.answers) if q.answers else 0.0,
        "prec@k": prec,
        "prec@2k": prec2,
        "mrr": rr,
    }


def aggregate(rows: Sequence[dict]) -> dict[str, float]:
    if not rows:
        return {m: 0.0 for m in METRICS}
    return {m: math.fsum(r[m] for r in rows) / len(rows) for m in METRICS}


def evaluate_rewrites(queries: Sequence[QueryRecord], rewrites: dict[str, list[str]], index: SearchIndex,
                      scorer: Scorer | None, setting: EvalSetting, label: str = "") -> EvalReport:
    """Score fixed rewrites per query (the policy-free half of ``evaluate``)."""
    k = setting.k
    rows = []
    for q in queries:
        rws = list(rewrites.get(q.query_id, []))[: setting.rewrites_needed]
        if setting.mode == "substitute" and not rws:
            rws = [q.question]  # nothing generated: fall back to the original query
        ctxs = []
        for depth in (k, 2 * k):
            d = retrieve_documents(index, q.question, depth)
            rd = [retrieve_documents(index, r, depth) for r in rws]
            ctxs.append(assemble_context(setting, d, rd, scorer, q.question, depth))
        rows.append(_query_row(q, rws, ctxs[0], ctxs[1], k))
    return EvalReport(asdict(setting), aggregate(rows), rows, label)


def evaluate(ckpt: PolicyCheckpoint | None, queries: Sequence[QueryRecord], index: SearchIndex,
             scorer: Scorer | None, setting: EvalSetting, gen_config: GenerationConfig | None = None,
             label: str = "") -> EvalReport:
    gen_config = gen_config or GenerationConfig()
    rewrites: dict[str, list[str]] = {}
    n = setting.rewrites_needed
    if n:
        if ckpt is None:
            raise ValueError(f"{setting.mode} evaluation needs a policy checkpoint")
        if ckpt.model.cfg.vocab_size != len(ckpt.vocab):
            raise ValueError(f"checkpoint vocabulary ({len(ckpt.vocab)}) does not match its model "
                             f"({ckpt.model.cfg.vocab_size})")
        gen = GenerationConfig(gen_config.temperature, gen_config.max_new_tokens, n, gen_config.seed)
        generator = torch.Generator().manual_seed(gen.seed)
        ckpt.model.eval()
        for q in queries:
            rewrites[q.query_id] = sample_rewrites(ckpt.model, ckpt.vocab, q.question, gen, generator)
    return evaluate_rewrites(queries, rewrites, index, scorer, setting, label)
