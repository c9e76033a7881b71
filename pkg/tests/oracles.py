"""Slow, independent reference implementations used as test oracles.

Nothing here imports the package under test; each function restates its
definition in the most direct form available.
"""

from __future__ import annotations

import hashlib
import math
import re
import string

import numpy as np

HASH_KEY = b"reges-hashed-test-v1"


def hashed_embedding(text: str, dim: int) -> list[float]:
    """Signed feature hashing, recomputed with plain Python lists."""
    tokens = []
    for raw in text.split():
        tok = raw.lower()
        while tok and not (tok[0].isalnum() or tok[0] == "_"):
            tok = tok[1:]
        while tok and not (tok[-1].isalnum() or tok[-1] == "_"):
            tok = tok[:-1]
        if tok:
            tokens.append(tok)
    if not tokens:
        tokens = [text.strip().lower()]
    acc = [0.0] * dim
    for tok in tokens:
        h = hashlib.blake2b(tok.encode(), digest_size=8, key=HASH_KEY)
        value = sum(b << (8 * i) for i, b in enumerate(h.digest()))
        sign = -1.0 if value >= 2**63 else 1.0
        acc[value % dim] += sign
    norm = math.sqrt(sum(x * x for x in acc))
    if norm == 0.0:
        # everything cancelled: one signed hit for the whole text
        h = hashlib.blake2b(("\x00" + text).encode(), digest_size=8, key=HASH_KEY)
        value = sum(b << (8 * i) for i, b in enumerate(h.digest()))
        acc = [0.0] * dim
        acc[value % dim] = -1.0 if value >= 2**63 else 1.0
        norm = 1.0
    return [x / norm for x in acc]


def brute_force_topk(ids: list[str], vectors: np.ndarray, query: np.ndarray, k: int) -> list[tuple[str, float]]:
    """Score every entry, sort by (-score, id), take k."""
    scored = []
    q = [float(x) for x in query]
    qn = math.sqrt(sum(x * x for x in q))
    for item_id, vec in zip(ids, vectors):
        v = [float(x) for x in vec]
        dot = math.fsum(a * b for a, b in zip(q, v))
        score = dot / (qn * math.sqrt(math.fsum(x * x for x in v)))
        scored.append((round(score, 12), item_id, score))
    scored.sort(key=lambda t: (-t[0], t[1]))
    return [(item_id, score) for _, item_id, score in scored[:k]]


def words(text: str) -> list[str]:
    out, cur = [], []
    for ch in text.lower():
        if ch.isalnum():
            cur.append(ch)
        elif cur:
            out.append("".join(cur))
            cur = []
    if cur:
        out.append("".join(cur))
    return out


def _grams(tokens, n):
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def slow_bleu(cand: list[str], refs: list[list[str]], n: int) -> float:
    if len(cand) < n:
        return 0.0
    precisions = []
    for m in range(1, n + 1):
        cg = _grams(cand, m)
        matched = 0
        for g in set(cg):
            best = max(_grams(r, m).count(g) for r in refs)
            matched += min(cg.count(g), best)
        if matched == 0:
            return 0.0
        precisions.append(matched / len(cg))
    ref_len = sorted((abs(len(r) - len(cand)), len(r)) for r in refs)[0][1]
    bp = 1.0 if len(cand) > ref_len else math.exp(1 - ref_len / len(cand))
    return bp * math.exp(sum(math.log(p) for p in precisions) / n)


def _f1(overlap, a, b):
    if overlap == 0:
        return 0.0
    p, r = overlap / a, overlap / b
    return 2 * p * r / (p + r)


def slow_rouge_n(cand: list[str], ref: list[str], n: int) -> float:
    cg, rg = _grams(cand, n), _grams(ref, n)
    if not cg or not rg:
        return 0.0
    remaining = list(rg)
    overlap = 0
    for g in cg:
        if g in remaining:
            remaining.remove(g)
            overlap += 1
    return _f1(overlap, len(cg), len(rg))


def slow_lcs(a: list[str], b: list[str]) -> int:
    memo: dict = {}

    def go(i, j):
        if i == len(a) or j == len(b):
            return 0
        if (i, j) not in memo:
            memo[(i, j)] = go(i + 1, j + 1) + 1 if a[i] == b[j] else max(go(i + 1, j), go(i, j + 1))
        return memo[(i, j)]

    return go(0, 0)


def slow_rouge_l(cand: list[str], ref: list[str]) -> float:
    if not cand or not ref:
        return 0.0
    return _f1(slow_lcs(cand, ref), len(cand), len(ref))


def levenshtein_recursive(a: str, b: str) -> int:
    memo: dict = {}

    def go(i, j):
        if i == len(a):
            return len(b) - j
        if j == len(b):
            return len(a) - i
        if (i, j) not in memo:
            memo[(i, j)] = min(go(i + 1, j) + 1, go(i, j + 1) + 1, go(i + 1, j + 1) + (a[i] != b[j]))
        return memo[(i, j)]

    return go(0, 0)


def title_key(raw: str) -> str:
    """Title normalization restated with str methods only (ASCII inputs)."""
    text = raw.lower()
    text = re.sub(r"\s*\(\d{4}\)\s*$", "", text)
    text = text.replace("'", "")
    text = "".join(" " if ch in string.punctuation else ch for ch in text)
    return " ".join(text.split())


def energy_distance(x: np.ndarray, y: np.ndarray) -> float:
    def mean_dist(a, b):
        total = 0.0
        for u in a:
            for v in b:
                total += math.sqrt(max(0.0, float(np.sum((u - v) ** 2))))
        return total / (len(a) * len(b))

    return 2 * mean_dist(x, y) - mean_dist(x, x) - mean_dist(y, y)
