"""Independent reference implementations used as test oracles.

Written without reusing package helpers so a shared bug cannot hide.
"""

from __future__ import annotations

import math
import re
import string
import unicodedata
from functools import lru_cache

import torch


def norm(text: str) -> str:
    text = unicodedata.normalize("NFKC", text).lower()
    out = []
    for ch in text:
        if ch in string.punctuation or unicodedata.category(ch)[0] == "P":
            continue
        out.append(ch)
    words = "".join(out).split()
    return " ".join(w for w in words if w not in ("a", "an", "the"))


def em(pred: str, answers) -> int:
    return 1 if norm(pred) in {norm(a) for a in answers} else 0


def words(text: str) -> list[str]:
    # ascii-only inputs in the randomized cases, so a plain split matches the tokenizer
    text = unicodedata.normalize("NFKC", text).lower()
    return re.sub(r"[^\w\s]", "", text).split()


def lcs(a: tuple, b: tuple) -> int:
    @lru_cache(maxsize=None)
    def go(i: int, j: int) -> int:
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))
    return go(0, 0)


def rouge_l(pred: str, refs) -> float:
    best = 0.0
    p = tuple(words(pred))
    for ref in refs:
        r = tuple(words(ref))
        n = lcs(p, r)
        if n:
            prec, rec = n / len(p), n / len(r)
            best = max(best, 2 * prec * rec / (prec + rec))
    return best


def has_answer(text: str, answers) -> bool:
    t = norm(text)
    return any(norm(a) and norm(a) in t for a in answers)


def precision(texts, answers, k) -> float:
    hits = 0
    for i in range(min(k, len(texts))):
        hits += has_answer(texts[i], answers)
    return hits / k


def mrr(texts, answers) -> float:
    for i, t in enumerate(texts):
        if has_answer(t, answers):
            return 1 / (i + 1)
    return 0.0


def gae(rewards, values, lam):
    """A_t = sum_{l>=0} lam^l delta_{t+l}, by explicit double loop."""
    T = len(rewards)
    v = list(values) + [0.0]
    deltas = [rewards[t] + v[t + 1] - v[t] for t in range(T)]
    adv = []
    for t in range(T):
        s = 0.0
        for l in range(T - t):
            s += lam**l * deltas[t + l]
        adv.append(s)
    return adv


def logsigmoid(x: float) -> float:
    return -math.log1p(math.exp(-x)) if x >= 0 else x - math.log1p(math.exp(x))


def sigmoid(x: float) -> float:
    return 1 / (1 + math.exp(-x))


def fd_check(model, loss_fn, h=1e-5, rtol=1e-4, atol=1e-9):
    """Compare autograd against central differences, coordinate by coordinate.

    A coordinate fails when |fd - autograd| > rtol * max(|fd|, |autograd|) + atol.
    The absolute floor only matters for gradients near zero, where the relative
    error of a finite difference is dominated by rounding. Returns
    (coordinates checked, failures, worst relative error over coordinates whose
    magnitude exceeds 1e-6).
    """
    params = [p for p in model.parameters() if p.requires_grad]
    analytic = torch.autograd.grad(loss_fn(model), params, allow_unused=True)
    checked, failures, worst = 0, [], 0.0
    for p, g in zip(params, analytic):
        g = torch.zeros_like(p) if g is None else g
        flat, gflat = p.data.view(-1), g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
                up = loss_fn(model).item()
                flat[i] = orig - h
                down = loss_fn(model).item()
                flat[i] = orig
            fd = (up - down) / (2 * h)
            an = gflat[i].item()
            err, scale = abs(fd - an), max(abs(fd), abs(an))
            if err > rtol * scale + atol:
                failures.append((tuple(p.shape), i, fd, an))
            if scale > 1e-6:
                worst = max(worst, err / scale)
            checked += 1
    return checked, failures, worst
