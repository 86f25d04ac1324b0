"""Character-level text metrics: normalization, exact match and chrF."""
from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Optional

from itmeval.kernels import ngram_stats


@dataclass(frozen=True)
class NormalizationPolicy:
    lowercase: bool = True
    collapse_whitespace: bool = True
    strip_punctuation: bool = False
    unicode_nfc: bool = True
    # chrF / fallback n-grams ignore whitespace by default
    remove_whitespace_in_ngrams: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "NormalizationPolicy":
        return cls(**data)


DEFAULT_POLICY = NormalizationPolicy()


def _strip_punct(text: str) -> str:
    return "".join(ch for ch in text if not unicodedata.category(ch).startswith("P"))


def normalize(text: str, policy: NormalizationPolicy = DEFAULT_POLICY) -> str:
    if policy.unicode_nfc:
        text = unicodedata.normalize("NFC", text)
    if policy.lowercase:
        text = text.lower()
        if policy.unicode_nfc:
            # lowercasing can emit combining sequences
            text = unicodedata.normalize("NFC", text)
    if policy.strip_punctuation:
        text = _strip_punct(text)
    if policy.collapse_whitespace:
        text = " ".join(text.split())
    return text


def exact_match(a: str, b: str, policy: NormalizationPolicy = DEFAULT_POLICY) -> int:
    return int(normalize(a, policy) == normalize(b, policy))


def ngram_text(text: str, policy: NormalizationPolicy = DEFAULT_POLICY) -> str:
    """The character sequence n-grams are drawn from."""
    text = normalize(text, policy)
    if policy.remove_whitespace_in_ngrams:
        text = "".join(text.split())
    return text


@dataclass(frozen=True)
class NgramProfile:
    order: int
    counts: Counter

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def char_ngram_profile(text: str, n: int, policy: NormalizationPolicy = DEFAULT_POLICY) -> NgramProfile:
    if n < 1:
        raise ValueError("n-gram order must be >= 1")
    s = ngram_text(text, policy)
    return NgramProfile(n, Counter(s[i : i + n] for i in range(len(s) - n + 1)))


def chrf_from_stats(stats: list[tuple[int, int, int]], beta: float = 1.0) -> Optional[float]:
    """Combine per-order (matched, cand_total, ref_total) into an F-score.

    Orders with no n-grams on either side are skipped. Returns ``None`` when
    every order was skipped.
    """
    precisions = []
    recalls = []
    for matched, c_total, r_total in stats:
        if c_total == 0 and r_total == 0:
            continue
        precisions.append(matched / c_total if c_total else 0.0)
        recalls.append(matched / r_total if r_total else 0.0)
    if not precisions:
        return None
    p = sum(precisions) / len(precisions)
    r = sum(recalls) / len(recalls)
    b2 = beta * beta
    denom = b2 * p + r
    if denom == 0:
        return 0.0
    return (1 + b2) * p * r / denom


def chrf(
    candidate: str,
    reference: str,
    max_n: int = 6,
    beta: float = 1.0,
    policy: NormalizationPolicy = DEFAULT_POLICY,
) -> float:
    """Character n-gram F-score averaged over orders 1..max_n.

    >>> chrf("cat", "cat")
    1.0
    >>> chrf("abc", "xyz")
    0.0
    """
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    if beta <= 0:
        raise ValueError("beta must be > 0")
    c = ngram_text(candidate, policy)
    r = ngram_text(reference, policy)
    if not c and not r:
        return 1.0
    if not c or not r:
        return 0.0
    score = chrf_from_stats(ngram_stats(c, r, max_n), beta)
    return 1.0 if score is None else min(1.0, score)
