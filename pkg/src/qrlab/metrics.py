"""QA and retrieval metrics: EM, Rouge-L, answer-containment Prec@K, MRR."""

from __future__ import annotations

import re
import string
import unicodedata
from typing import Sequence

from .corpus import Document, tokenize_text

_ARTICLES = re.compile(r"\b(a|an|the)\b")


def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation and English articles, collapse whitespace."""
    text = unicodedata.normalize("NFKC", text).lower()
    text = "".join(ch for ch in text if not unicodedata.category(ch).startswith("P")
                   and ch not in string.punctuation)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def exact_match(prediction: str, answers: Sequence[str]) -> int:
    pred = normalize_answer(prediction)
    return int(any(pred == normalize_answer(a) for a in answers))


def _lcs_len(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(prediction: str, references: str | Sequence[str]) -> float:
    """Token-level LCS F1; with several references the best F1 is returned."""
    if isinstance(references, str):
        references = [references]
    pred = tokenize_text(prediction)
    best = 0.0
    for ref in references:
        rtoks = tokenize_text(ref)
        lcs = _lcs_len(pred, rtoks)
        if lcs == 0:
            continue
        p, r = lcs / len(pred), lcs / len(rtoks)
        best = max(best, 2 * p * r / (p + r))
    return best


def contains_answer(doc: Document, answers: Sequence[str]) -> bool:
    hay = normalize_answer(doc.text)
    for a in answers:
        na = normalize_answer(a)
        if na and na in hay:
            return True
    return False


def precision_at_k(docs: Sequence[Document], answers: Sequence[str], k: int) -> float:
    """Fraction of the top-k slots holding an answer-bearing document.

    Missing slots (fewer than k documents) count as misses.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    hits = sum(contains_answer(d, answers) for d in docs[:k])
    return hits / k


def mrr(docs: Sequence[Document], answers: Sequence[str]) -> float:
    for rank, d in enumerate(docs, start=1):
        if contains_answer(d, answers):
            return 1.0 / rank
    return 0.0
