"""Text vectorization: tokenizer, Bag-of-Words / TF-IDF models, cosine
similarity, and embedding providers.

Two providers are included: a deterministic hashing provider that needs no
network (every token maps to a fixed pseudo-random direction; a text embeds
to the normalized mean of its token vectors) and a thin client for a remote
embedding endpoint. The hashing provider is what makes the whole pipeline
and test suite runnable offline.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import requests

from routekit.errors import DataError, EmbedderError

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)

VECTORIZER_FORMAT_VERSION = 1


def tokenize(text: str) -> list[str]:
    """Lowercase and split on any non-alphanumeric boundary."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class SparseVector:
    """Sorted (index, value) pairs over a fixed dimension."""

    indices: np.ndarray  # int64, strictly increasing
    values: np.ndarray   # float64
    dimension: int

    @property
    def is_zero(self) -> bool:
        return len(self.indices) == 0

    def to_dense(self) -> np.ndarray:
        dense = np.zeros(self.dimension, dtype=np.float64)
        dense[self.indices] = self.values
        return dense


@dataclass
class VectorizerModel:
    """A fitted BoW or TF-IDF vectorizer.

    vocabulary maps token -> dense index in [0, size); for tfidf, idf holds
    one inverse-document-frequency value per index.
    """

    kind: str  # "bow" | "tfidf"
    vocabulary: dict[str, int]
    min_frequency: int
    max_size: int
    idf: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.vocabulary)

    def save(self, path: str | Path) -> None:
        payload = {
            "version": VECTORIZER_FORMAT_VERSION,
            "kind": self.kind,
            "min_frequency": self.min_frequency,
            "max_size": self.max_size,
            # index order, so position i is the token with index i
            "tokens": sorted(self.vocabulary, key=self.vocabulary.get),
            "idf": None if self.idf is None else self.idf.tolist(),
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "VectorizerModel":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        if payload.get("version") != VECTORIZER_FORMAT_VERSION:
            raise DataError(f"unsupported vectorizer file version: {payload.get('version')}")
        idf = payload["idf"]
        return cls(
            kind=payload["kind"],
            vocabulary={tok: i for i, tok in enumerate(payload["tokens"])},
            min_frequency=payload["min_frequency"],
            max_size=payload["max_size"],
            idf=None if idf is None else np.asarray(idf, dtype=np.float64),
        )


def fit_vectorizer(
    corpus: list[str],
    kind: str = "bow",
    min_frequency: int = 1,
    max_size: int = 30_000,
) -> VectorizerModel:
    """Fit a vocabulary (and idf table for tfidf) on a corpus.

    Tokens are ranked by total corpus frequency, ties broken
    lexicographically; at most max_size survive.
    """
    if not corpus:
        raise DataError("cannot fit a vectorizer on an empty corpus")
    if kind not in ("bow", "tfidf"):
        raise DataError(f"unknown vectorizer kind: {kind!r}")

    freq: Counter[str] = Counter()
    doc_freq: Counter[str] = Counter()
    for doc in corpus:
        tokens = tokenize(doc)
        freq.update(tokens)
        doc_freq.update(set(tokens))

    ranked = sorted(
        (tok for tok, n in freq.items() if n >= min_frequency),
        key=lambda tok: (-freq[tok], tok),
    )[:max_size]
    vocabulary = {tok: i for i, tok in enumerate(ranked)}

    idf = None
    if kind == "tfidf":
        n_docs = len(corpus)
        idf = np.empty(len(ranked), dtype=np.float64)
        for tok, i in vocabulary.items():
            idf[i] = math.log((1.0 + n_docs) / (1.0 + doc_freq[tok])) + 1.0

    return VectorizerModel(kind=kind, vocabulary=vocabulary,
                           min_frequency=min_frequency, max_size=max_size, idf=idf)


def vectorize(text: str, model: VectorizerModel) -> SparseVector:
    """Vectorize text against a fitted model; out-of-vocabulary tokens drop.

    bow: raw counts. tfidf: count * idf, L2-normalized. All-OOV text yields
    a zero vector (is_zero flags it)."""
    counts: Counter[int] = Counter()
    for tok in tokenize(text):
        idx = model.vocabulary.get(tok)
        if idx is not None:
            counts[idx] += 1
    if not counts:
        return SparseVector(
            indices=np.empty(0, dtype=np.int64),
            values=np.empty(0, dtype=np.float64),
            dimension=model.size,
        )
    indices = np.array(sorted(counts), dtype=np.int64)
    values = np.array([counts[i] for i in indices], dtype=np.float64)
    if model.kind == "tfidf":
        values = values * model.idf[indices]
        values /= np.linalg.norm(values)
    return SparseVector(indices=indices, values=values, dimension=model.size)


def cosine_with_flag(a: np.ndarray, b: np.ndarray) -> tuple[float, bool]:
    """Cosine similarity plus a degenerate flag (True when either vector has
    zero norm, in which case the similarity is defined as 0)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"cosine dimension mismatch: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0, True
    return float(a @ b) / (na * nb), False


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return cosine_with_flag(a, b)[0]


class EmbeddingProvider(Protocol):
    name: str
    dimension: int

    def embed(self, text: str) -> np.ndarray: ...


class HashEmbedder:
    """Deterministic offline embedding provider.

    Each token gets a fixed pseudo-random unit-scale vector seeded from its
    sha256 digest; a text embeds to the L2-normalized mean of its token
    vectors, so equal token multisets give identical embeddings. Empty or
    token-free text embeds to the zero vector.
    """

    def __init__(self, dimension: int = 64):
        self.dimension = dimension
        self.name = f"hash-{dimension}"
        self._token_cache: dict[str, np.ndarray] = {}

    def _token_vector(self, token: str) -> np.ndarray:
        vec = self._token_cache.get(token)
        if vec is None:
            seed = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "little")
            vec = np.random.default_rng(seed).standard_normal(self.dimension)
            vec /= np.linalg.norm(vec)
            self._token_cache[token] = vec
        return vec

    def embed(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        if not tokens:
            return np.zeros(self.dimension, dtype=np.float64)
        acc = np.zeros(self.dimension, dtype=np.float64)
        for tok in tokens:
            acc += self._token_vector(tok)
        acc /= len(tokens)
        norm = np.linalg.norm(acc)
        if norm > 0.0:
            acc /= norm
        return acc


class RemoteEmbedder:
    """Client for a remote embedding endpoint.

    Wire contract: POST {"text": ..., "model": ...} -> {"vector": [...]}.
    Failures raise EmbedderError carrying retry metadata.
    """

    def __init__(self, endpoint: str, model_name: str, dimension: int,
                 timeout_seconds: float = 30.0, retries: int = 2,
                 backoff_seconds: float = 0.2):
        self.endpoint = endpoint
        self.model_name = model_name
        self.dimension = dimension
        self.name = f"remote:{model_name}"
        self.timeout_seconds = timeout_seconds
        self.retries = retries
        self.backoff_seconds = backoff_seconds

    def embed(self, text: str) -> np.ndarray:
        last_error: Exception | None = None
        for attempt in range(1, self.retries + 2):
            try:
                resp = requests.post(
                    self.endpoint,
                    json={"text": text, "model": self.model_name},
                    timeout=self.timeout_seconds,
                )
                resp.raise_for_status()
                vector = np.asarray(resp.json()["vector"], dtype=np.float64)
                if vector.shape != (self.dimension,):
                    raise EmbedderError(
                        f"provider returned dimension {vector.shape}, expected ({self.dimension},)",
                        retryable=False, attempts=attempt,
                    )
                return vector
            except EmbedderError:
                raise
            except (requests.Timeout, requests.ConnectionError) as exc:
                last_error = exc
                if attempt <= self.retries:
                    time.sleep(self.backoff_seconds * attempt)
            except (requests.HTTPError, KeyError, ValueError) as exc:
                raise EmbedderError(f"bad provider response: {exc}",
                                    retryable=False, attempts=attempt) from exc
        raise EmbedderError(f"provider unreachable: {last_error}",
                            retryable=True, attempts=self.retries + 1) from last_error


@dataclass
class _CachingEmbedder:
    """Wraps a provider with a text -> vector cache (providers are
    deterministic per text, so caching is safe)."""

    provider: EmbeddingProvider
    _cache: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def name(self) -> str:
        return self.provider.name

    @property
    def dimension(self) -> int:
        return self.provider.dimension

    def embed(self, text: str) -> np.ndarray:
        vec = self._cache.get(text)
        if vec is None:
            vec = self.provider.embed(text)
            self._cache[text] = vec
        return vec


def with_cache(provider: EmbeddingProvider) -> _CachingEmbedder:
    return _CachingEmbedder(provider)
