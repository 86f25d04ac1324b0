"""BERTScore-style semantic similarity over pluggable token-embedding providers.

Two backends:

``remote``
    texts are embedded by an :class:`EmbeddingProvider` (token vectors) and
    scored with greedy max-cosine matching, see :func:`bert_score_f1`.
``fallback``
    an offline stand-in, cosine between character trigram count vectors.
"""
from __future__ import annotations

import logging
import math
import os
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Protocol, Sequence

import numpy as np

from itmeval.kernels import ngram_cosine_terms
from itmeval.text import DEFAULT_POLICY, NormalizationPolicy, ngram_text

logger = logging.getLogger(__name__)

FALLBACK_ORDER = 3


class ProviderError(RuntimeError):
    """The embedding service failed (after retries) or answered garbage."""


@dataclass(frozen=True)
class SimilarityConfig:
    backend: str = "fallback"
    rescale: bool = False
    rescale_baseline: float = 0.0
    clamp_negative: bool = True
    idf_weighting: bool = False

    def __post_init__(self):
        if self.backend not in ("fallback", "remote"):
            raise ValueError(f"unknown similarity backend {self.backend!r}")
        if self.rescale and not self.rescale_baseline < 1.0:
            raise ValueError("rescale_baseline must be < 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SimilarityConfig":
        return cls(**data)


@dataclass
class TokenEmbeddingSequence:
    tokens: list[str]
    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[1] < 1:
            raise ValueError("vectors must be a (tokens, dim) matrix with dim >= 1")
        if len(self.tokens) != self.vectors.shape[0] or not self.tokens:
            raise ValueError("need one vector per token and at least one token")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("non-finite embedding values")
        if np.any(np.linalg.norm(self.vectors, axis=1) == 0):
            raise ValueError("all-zero token vector")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def bert_score_f1(
    candidate: TokenEmbeddingSequence,
    reference: TokenEmbeddingSequence,
    cfg: SimilarityConfig = SimilarityConfig(),
    idf: Optional[Mapping[str, float]] = None,
) -> float:
    """Greedy-matching F1 over token cosine similarities.

    Precision averages each candidate token's best cosine against the
    reference; recall does the reverse. With ``cfg.idf_weighting`` and an
    ``idf`` table the averages are idf-weighted.
    """
    if candidate.dim != reference.dim:
        raise ValueError(f"embedding dimension mismatch: {candidate.dim} vs {reference.dim}")
    c = candidate.vectors / np.linalg.norm(candidate.vectors, axis=1, keepdims=True)
    r = reference.vectors / np.linalg.norm(reference.vectors, axis=1, keepdims=True)
    sim = c @ r.T
    if cfg.clamp_negative:
        sim = np.clip(sim, 0.0, None)
    best_c = sim.max(axis=1)
    best_r = sim.max(axis=0)
    if cfg.idf_weighting and idf is not None:
        wc = np.array([idf.get(t, 1.0) for t in candidate.tokens])
        wr = np.array([idf.get(t, 1.0) for t in reference.tokens])
        p = float(best_c @ wc / wc.sum())
        rec = float(best_r @ wr / wr.sum())
    else:
        p = float(best_c.mean())
        rec = float(best_r.mean())
    f = 0.0 if p + rec == 0 else 2 * p * rec / (p + rec)
    if cfg.rescale:
        f = (f - cfg.rescale_baseline) / (1 - cfg.rescale_baseline)
    if cfg.clamp_negative:
        f = max(0.0, f)
    return min(1.0, f)


def fallback_similarity(a: str, b: str, policy: NormalizationPolicy = DEFAULT_POLICY) -> float:
    """Cosine between character trigram count vectors (whitespace removed).

    Texts shorter than three characters use the longest order both can
    supply, so identical non-empty texts always score 1.
    """
    x = ngram_text(a, policy)
    y = ngram_text(b, policy)
    if not x and not y:
        return 1.0
    if not x or not y:
        return 0.0
    n = min(FALLBACK_ORDER, len(x), len(y))
    dot, nx, ny = ngram_cosine_terms(x, y, n)
    if dot == 0:
        return 0.0
    return min(1.0, dot / math.sqrt(nx * ny))


# ---------------------------------------------------------------------------
# providers


@dataclass(frozen=True)
class ProviderCapabilities:
    name: str
    version: str
    dimension: Optional[int] = None
    max_batch_size: int = 32
    concurrent: bool = False


class EmbeddingProvider(Protocol):
    capabilities: ProviderCapabilities

    def embed(self, texts: Sequence[str]) -> list[TokenEmbeddingSequence]: ...


def _parse_embedding_response(body: dict, n_texts: int) -> tuple[str, int, list[TokenEmbeddingSequence]]:
    try:
        model = str(body["model"])
        dim = int(body["dim"])
        embeddings = body["embeddings"]
        tokens = body.get("tokens")
        if len(embeddings) != n_texts:
            raise ValueError(f"expected {n_texts} embeddings, got {len(embeddings)}")
        out = []
        for i, vecs in enumerate(embeddings):
            toks = tokens[i] if tokens else [f"#{k}" for k in range(len(vecs))]
            seq = TokenEmbeddingSequence(list(toks), np.asarray(vecs, dtype=np.float64))
            if seq.dim != dim:
                raise ValueError(f"vector dim {seq.dim} != declared {dim}")
            out.append(seq)
    except (KeyError, TypeError, ValueError) as exc:
        raise ProviderError(f"malformed embedding response: {exc}") from exc
    return model, dim, out


class RemoteEmbeddingProvider:
    """HTTP client for a token-embedding service.

    Request ``{"texts": [...]}``; response
    ``{"model": str, "dim": int, "embeddings": [[[float, ...], ...], ...]}``.
    """

    def __init__(
        self,
        endpoint: Optional[str] = None,
        api_key: Optional[str] = None,
        timeout: float = 30.0,
        max_retries: int = 3,
        backoff: float = 0.5,
        max_batch_size: int = 32,
        transport=None,
    ):
        import httpx

        endpoint = endpoint or os.environ.get("EMBEDDING_ENDPOINT")
        if not endpoint:
            raise ValueError("no embedding endpoint (set EMBEDDING_ENDPOINT)")
        api_key = api_key if api_key is not None else os.environ.get("EMBEDDING_API_KEY")
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.endpoint = endpoint
        self.max_retries = max_retries
        self.backoff = backoff
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)
        self._model: Optional[str] = None
        self._dim: Optional[int] = None
        self._max_batch = max_batch_size

    @property
    def capabilities(self) -> ProviderCapabilities:
        return ProviderCapabilities(
            name="remote",
            version=self._model or "unknown",
            dimension=self._dim,
            max_batch_size=self._max_batch,
            concurrent=True,
        )

    def _post(self, payload: dict) -> dict:
        import httpx

        last: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                resp = self._client.post(self.endpoint, json=payload)
                if resp.status_code >= 500 or resp.status_code == 429:
                    raise httpx.HTTPStatusError(
                        f"server error {resp.status_code}", request=resp.request, response=resp
                    )
                if resp.status_code >= 400:
                    raise ProviderError(f"embedding service rejected request: HTTP {resp.status_code}")
                return resp.json()
            except (httpx.TransportError, httpx.HTTPStatusError, ValueError) as exc:
                last = exc
                logger.warning("embedding request failed (attempt %d): %s", attempt + 1, exc)
                if attempt < self.max_retries:
                    time.sleep(self.backoff * 2**attempt)
        raise ProviderError(f"embedding service unavailable after {self.max_retries + 1} attempts: {last}")

    def embed(self, texts: Sequence[str]) -> list[TokenEmbeddingSequence]:
        texts = list(texts)
        out: list[TokenEmbeddingSequence] = []
        for start in range(0, len(texts), self._max_batch):
            batch = texts[start : start + self._max_batch]
            model, dim, seqs = _parse_embedding_response(self._post({"texts": batch}), len(batch))
            if self._model is not None and model != self._model:
                raise ProviderError(f"provider model changed mid-run: {self._model} -> {model}")
            self._model, self._dim = model, dim
            out.extend(seqs)
        return out

    def close(self):
        self._client.close()


class StaticEmbeddingProvider:
    """Scripted provider: looks each text up in a fixed table.

    ``table`` maps text to a list of token vectors (or ``(tokens, vectors)``).
    Unknown texts raise :class:`ProviderError`, or are embedded with
    ``default`` when one is given.
    """

    def __init__(self, table: Mapping[str, object], name: str = "static", version: str = "1", default=None):
        self._table = dict(table)
        self._default = default
        self.calls = 0
        dims = {np.asarray(self._vectors(v)).shape[1] for v in self._table.values()}
        self.capabilities = ProviderCapabilities(
            name=name, version=version, dimension=dims.pop() if len(dims) == 1 else None, concurrent=True
        )

    @staticmethod
    def _vectors(entry):
        return entry[1] if isinstance(entry, tuple) else entry

    def embed(self, texts: Sequence[str]) -> list[TokenEmbeddingSequence]:
        self.calls += 1
        out = []
        for t in texts:
            entry = self._table.get(t)
            if entry is None:
                if self._default is None:
                    raise ProviderError(f"no scripted embedding for {t!r}")
                entry = self._default(t)
            if isinstance(entry, tuple):
                tokens, vecs = entry
            else:
                vecs = entry
                tokens = [f"#{k}" for k in range(len(vecs))]
            out.append(TokenEmbeddingSequence(list(tokens), np.asarray(vecs, dtype=np.float64)))
        return out


# ---------------------------------------------------------------------------
# memoized scoring


@dataclass
class SimilarityScorer:
    """Scores text pairs under one config/provider, memoizing results."""

    cfg: SimilarityConfig = field(default_factory=SimilarityConfig)
    provider: Optional[EmbeddingProvider] = None
    policy: NormalizationPolicy = DEFAULT_POLICY
    idf: Optional[Mapping[str, float]] = None
    use_cache: bool = True

    def __post_init__(self):
        if self.cfg.backend == "remote" and self.provider is None:
            raise ValueError("remote backend needs an embedding provider")
        self._pairs: dict[tuple[str, str], float] = {}
        self._embeddings: dict[str, TokenEmbeddingSequence] = {}
        self._lock = threading.Lock()
        self._provider_lock = threading.Lock()

    def identity(self) -> dict:
        if self.cfg.backend == "fallback":
            return {"name": "fallback-char-trigram", "version": "1"}
        caps = self.provider.capabilities
        return {"name": caps.name, "version": caps.version, "dimension": caps.dimension}

    def _embed_missing(self, texts: Sequence[str]) -> None:
        missing = sorted({t for t in texts if t not in self._embeddings})
        if not missing:
            return
        caps = self.provider.capabilities
        if caps.concurrent:
            seqs = self.provider.embed(missing)
        else:
            with self._provider_lock:
                seqs = self.provider.embed(missing)
        with self._lock:
            for t, s in zip(missing, seqs):
                self._embeddings.setdefault(t, s)

    def prefetch(self, texts: Sequence[str]) -> None:
        """Embed all ``texts`` up front (remote backend only)."""
        if self.cfg.backend == "remote":
            self._embed_missing(texts)

    def _compute(self, a: str, b: str) -> float:
        if self.cfg.backend == "fallback":
            return fallback_similarity(a, b, self.policy)
        self._embed_missing([a, b])
        return bert_score_f1(self._embeddings[a], self._embeddings[b], self.cfg, self.idf)

    def score(self, a: str, b: str) -> float:
        if not self.use_cache:
            return self._compute(a, b)
        key = (a, b)
        hit = self._pairs.get(key)
        if hit is not None:
            return hit
        value = self._compute(a, b)
        with self._lock:
            return self._pairs.setdefault(key, value)


def score_texts(
    a: str,
    b: str,
    cfg: SimilarityConfig = SimilarityConfig(),
    provider: Optional[EmbeddingProvider] = None,
    policy: NormalizationPolicy = DEFAULT_POLICY,
) -> float:
    """One-off pair score. Use :class:`SimilarityScorer` to memoize across calls."""
    return SimilarityScorer(cfg, provider, policy, use_cache=False).score(a, b)
