"""Pure-Python n-gram kernels. Same contract as the compiled ``_kernels``."""
from __future__ import annotations

from collections import Counter


def _grams(s: str, n: int) -> Counter:
    return Counter(s[i : i + n] for i in range(len(s) - n + 1))


def ngram_stats(cand: str, ref: str, max_n: int) -> list[tuple[int, int, int]]:
    """Per order k = 1..max_n: (clipped matches, candidate total, reference total)."""
    out = []
    for n in range(1, max_n + 1):
        c = _grams(cand, n)
        r = _grams(ref, n)
        if len(c) > len(r):
            c, r = r, c
        matched = sum(min(cnt, r[g]) for g, cnt in c.items() if g in r)
        out.append((matched, max(0, len(cand) - n + 1), max(0, len(ref) - n + 1)))
    return out


def ngram_cosine_terms(a: str, b: str, n: int) -> tuple[int, int, int]:
    """(dot, |a|^2, |b|^2) of the order-n character count vectors."""
    ca = _grams(a, n)
    cb = _grams(b, n)
    dot = sum(cnt * cb[g] for g, cnt in ca.items() if g in cb)
    return dot, sum(v * v for v in ca.values()), sum(v * v for v in cb.values())
