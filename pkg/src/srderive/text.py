"""Tokenization and per-token embedding providers.

A single tokenizer is used everywhere (retrieval, TF-IDF, metrics) so that
the token-weight table is indexed by the same vocabulary the scorer sees.
"""

from __future__ import annotations

import hashlib
import re
import threading
from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import httpx
import numpy as np

from ._http import RetryPolicy, post_json
from .errors import InvalidInputError, MalformedResponseError

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)

DEFAULT_HASH_SEED = 20240501
DEFAULT_DIM = 64


def tokenize(text: str) -> TokenSequence:
    """Lowercase ``text`` and split on every maximal run of non-alphanumerics.

    >>> tokenize("Verify TLS 1.2!").tokens
    ('verify', 'tls', '1', '2')
    """
    return TokenSequence(tuple(_TOKEN_RE.findall(text.lower())), text)


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[str, ...]
    source: str = ""

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)

    def truncated(self, max_tokens: int | None) -> TokenSequence:
        if max_tokens is None or len(self.tokens) <= max_tokens:
            return self
        return TokenSequence(self.tokens[:max_tokens], self.source)


@dataclass(frozen=True)
class TokenEmbeddings:
    """``matrix`` is (m, d) with unit-norm rows; row i embeds token i."""

    matrix: np.ndarray
    provider_id: str

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    def __len__(self) -> int:
        return int(self.matrix.shape[0])


@runtime_checkable
class EmbeddingProvider(Protocol):
    provider_id: str
    dim: int
    deterministic: bool

    def embed_tokens(self, tokens: tuple[str, ...]) -> np.ndarray:
        """Return an (len(tokens), dim) array of unit rows."""
        ...


def embed(provider: EmbeddingProvider, seq: TokenSequence) -> TokenEmbeddings:
    if len(seq) == 0:
        raise InvalidInputError("cannot embed an empty token sequence")
    matrix = np.asarray(provider.embed_tokens(seq.tokens), dtype=np.float64)
    if matrix.shape != (len(seq), provider.dim):
        raise MalformedResponseError(
            f"provider {provider.provider_id} returned shape {matrix.shape}, "
            f"expected {(len(seq), provider.dim)}")
    return TokenEmbeddings(matrix, provider.provider_id)


def _normalize_rows(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise MalformedResponseError("embedding row with zero norm")
    return matrix / norms


@dataclass
class HashEmbeddingProvider:
    """Deterministic, non-contextual token embedder.

    Algorithm, per token:

    1. ``key = blake2b(token.encode("utf-8"), digest_size=8,
       key=seed.to_bytes(8, "little"))`` read as a little-endian uint64;
    2. draw ``d`` standard normals from ``numpy.random.Generator(PCG64(key))``;
    3. divide by the Euclidean norm.

    Identical tokens always map to the identical vector; distinct tokens map
    to near-orthogonal vectors (expected |cos| is about sqrt(2 / (pi d))).
    """

    dim: int = DEFAULT_DIM
    seed: int = DEFAULT_HASH_SEED
    deterministic: bool = field(default=True, init=False)
    _cache: dict[str, np.ndarray] = field(default_factory=dict, init=False, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False)

    def __post_init__(self) -> None:
        if self.dim < 8:
            raise InvalidInputError("hash embedding dimension must be >= 8")
        if not 0 <= self.seed < 2**64:
            raise InvalidInputError("seed must fit in 64 unsigned bits")

    @property
    def provider_id(self) -> str:
        return f"hash-blake2b-pcg64/d={self.dim}/seed={self.seed}"

    def token_key(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8,
                                 key=self.seed.to_bytes(8, "little")).digest()
        return int.from_bytes(digest, "little")

    def vector(self, token: str) -> np.ndarray:
        with self._lock:
            cached = self._cache.get(token)
        if cached is not None:
            return cached
        rng = np.random.Generator(np.random.PCG64(self.token_key(token)))
        v = rng.standard_normal(self.dim)
        v /= np.linalg.norm(v)
        v.setflags(write=False)
        with self._lock:
            self._cache[token] = v
        return v

    def embed_tokens(self, tokens: tuple[str, ...]) -> np.ndarray:
        return np.stack([self.vector(t) for t in tokens])


class RemoteEmbeddingProvider:
    """Per-token embeddings from an HTTP service.

    Wire format: ``POST {url}`` with ``{"model": ..., "tokens": [...]}``;
    the service answers ``{"embeddings": [[float, ...], ...]}`` with one row
    per token. Rows are re-normalized locally.
    """

    deterministic = False

    def __init__(self, url: str, model: str, dim: int, *, api_key: str | None = None,
                 timeout: float = 30.0, policy: RetryPolicy = RetryPolicy(),
                 client: httpx.Client | None = None) -> None:
        self.url = url
        self.model = model
        self.dim = dim
        self.provider_id = f"remote:{model}/d={dim}"
        self._headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._policy = policy
        self._client = client or httpx.Client(timeout=timeout)

    def embed_tokens(self, tokens: tuple[str, ...]) -> np.ndarray:
        data = post_json(self._client, self.url, {"model": self.model, "tokens": list(tokens)},
                         headers=self._headers, policy=self._policy)
        rows = data.get("embeddings")
        if not isinstance(rows, list) or len(rows) != len(tokens):
            raise MalformedResponseError("embedding response must carry one row per token")
        try:
            matrix = np.asarray(rows, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise MalformedResponseError(f"non-numeric embedding rows: {exc}") from exc
        if matrix.ndim != 2 or matrix.shape[1] != self.dim:
            raise MalformedResponseError(f"expected rows of width {self.dim}, got {matrix.shape}")
        return _normalize_rows(matrix)
