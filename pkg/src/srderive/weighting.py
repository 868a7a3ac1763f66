"""TF-IDF statistics and the trainable token-weight table."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from collections.abc import Mapping
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Literal

import numpy as np

from .corpus import VrCorpus
from .errors import DegenerateInputError, InvalidInputError, ParseError
from .text import TokenSequence, tokenize

logger = logging.getLogger(__name__)

WEIGHT_MIN = 0.05
WEIGHT_MAX = 20.0
Aggregation = Literal["mean", "max", "idf-only"]


@dataclass(frozen=True)
class TfIdfTable:
    entries: Mapping[tuple[str, str], float]
    doc_freq: Mapping[str, int]
    corpus_size: int

    def idf(self, token: str) -> float:
        return math.log(self.corpus_size / self.doc_freq[token])

    @property
    def vocabulary(self) -> list[str]:
        return sorted(self.doc_freq)


def compute_tf_idf(corpus: VrCorpus | Mapping[str, str | TokenSequence]) -> TfIdfTable:
    """tf = count / len(doc), idf = ln(D / df), entry = tf * idf.

    ``corpus`` is a VrCorpus (composed texts are used) or any mapping of
    document id to text or token sequence.
    """
    if isinstance(corpus, VrCorpus):
        docs = {r.id: tokenize(r.composed_text).tokens for r in corpus.records}
    else:
        docs = {k: (v.tokens if isinstance(v, TokenSequence) else tokenize(v).tokens)
                for k, v in corpus.items()}
    if not docs:
        raise InvalidInputError("TF-IDF needs at least one document")
    counts = {}
    df: Counter[str] = Counter()
    for doc_id, toks in docs.items():
        if not toks:
            raise InvalidInputError(f"document {doc_id} has no tokens")
        c = Counter(toks)
        counts[doc_id] = (c, len(toks))
        df.update(c.keys())
    D = len(docs)
    idf = {t: math.log(D / n) for t, n in df.items()}
    entries = {}
    for doc_id, (c, length) in counts.items():
        for t, n in c.items():
            entries[(t, doc_id)] = (n / length) * idf[t]
    return TfIdfTable(MappingProxyType(entries), MappingProxyType(dict(df)), D)


@dataclass(frozen=True)
class TokenWeightTable:
    weights: Mapping[str, float]
    default_weight: float = 1.0
    version: int = 0
    trained: bool = False
    bounds: tuple[float, float] = field(default=(WEIGHT_MIN, WEIGHT_MAX), compare=False)

    def __post_init__(self) -> None:
        if not isinstance(self.weights, MappingProxyType):
            object.__setattr__(self, "weights", MappingProxyType(dict(self.weights)))
        if self.default_weight <= 0:
            raise InvalidInputError("default weight must be positive")
        bad = [t for t, w in self.weights.items() if not w > 0 or not math.isfinite(w)]
        if bad:
            raise InvalidInputError(f"non-positive or non-finite weights for {bad[:5]}")

    def __getitem__(self, token: str) -> float:
        return self.weights.get(token, self.default_weight)

    def __len__(self) -> int:
        return len(self.weights)

    def vocab_mean(self) -> float:
        return math.fsum(self.weights.values()) / len(self.weights) if self.weights else 0.0

    def updated(self, weights: Mapping[str, float]) -> TokenWeightTable:
        """New table with ``weights`` overlaid and the version bumped."""
        merged = dict(self.weights)
        merged.update(weights)
        return TokenWeightTable(merged, self.default_weight, self.version + 1, True, self.bounds)

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": self.version,
            "default_weight": self.default_weight,
            "trained": self.trained,
            "weights": {t: self.weights[t] for t in sorted(self.weights)},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> TokenWeightTable:
        try:
            weights = {str(k): float(v) for k, v in data["weights"].items()}
            return cls(weights, float(data.get("default_weight", 1.0)),
                       int(data.get("version", 0)), bool(data.get("trained", False)))
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise ParseError(f"bad weight table: {exc}") from exc

    @classmethod
    def uniform(cls, vocabulary: list[str] | tuple[str, ...] = ()) -> TokenWeightTable:
        """All weights 1.0: the zero-shot configuration."""
        return cls({t: 1.0 for t in vocabulary})


def _raw_weights(tfidf: TfIdfTable, aggregation: Aggregation) -> dict[str, float]:
    if aggregation == "idf-only":
        return {t: tfidf.idf(t) for t in tfidf.doc_freq}
    grouped: dict[str, list[float]] = {}
    for (t, _), v in tfidf.entries.items():
        grouped.setdefault(t, []).append(v)
    if aggregation == "mean":
        return {t: math.fsum(vs) / len(vs) for t, vs in grouped.items()}
    if aggregation == "max":
        return {t: max(vs) for t, vs in grouped.items()}
    raise InvalidInputError(f"unknown aggregation {aggregation!r}")


def rescale_to_unit_mean(raw: np.ndarray, lo: float = WEIGHT_MIN,
                         hi: float = WEIGHT_MAX) -> tuple[np.ndarray, int, int]:
    """Find s with mean(clip(s * raw, lo, hi)) == 1 and return the clipped vector.

    An all-zero input (e.g. a single-document corpus, where every idf is 0)
    maps to all ones.

    Without clamping this is plain division by the mean. When some entries
    would fall outside [lo, hi] the scale is re-solved with those entries
    pinned, so the mean stays exactly 1 and every entry stays in bounds.
    Returns (weights, n_clamped_low, n_clamped_high).
    """
    V = raw.size
    if V == 0:
        raise DegenerateInputError("no tokens to weight")
    if not np.any(raw > 0):
        # nothing distinguishes any token: the symmetric answer is uniform
        logger.warning("all raw token weights are zero; using uniform weights")
        return np.ones(V), 0, 0
    if not lo < 1.0 < hi:
        raise InvalidInputError("bounds must straddle 1")
    s = V / math.fsum(raw)
    for _ in range(V + 2):
        low = raw * s < lo
        high = raw * s > hi
        free = ~(low | high)
        free_sum = math.fsum(raw[free])
        if free_sum == 0:
            raise DegenerateInputError("cannot reach unit mean within the weight bounds")
        s_new = (V - lo * low.sum() - hi * high.sum()) / free_sum
        if s_new <= 0:
            raise DegenerateInputError("cannot reach unit mean within the weight bounds")
        if np.array_equal(low, raw * s_new < lo) and np.array_equal(high, raw * s_new > hi):
            s = s_new
            break
        s = s_new
    else:
        raise DegenerateInputError("weight rescaling did not converge")
    w = np.where(low, lo, np.where(high, hi, raw * s))
    return w, int(low.sum()), int(high.sum())


def init_weight_table(tfidf: TfIdfTable, aggregation: Aggregation = "mean",
                      bounds: tuple[float, float] = (WEIGHT_MIN, WEIGHT_MAX)) -> TokenWeightTable:
    raw = _raw_weights(tfidf, aggregation)
    vocab = sorted(raw)
    arr = np.array([raw[t] for t in vocab], dtype=np.float64)
    w, n_low, n_high = rescale_to_unit_mean(arr, *bounds)
    if n_low or n_high:
        pinned = [t for t, v in zip(vocab, w) if v in bounds]
        logger.info("weight init clamped %d low / %d high (e.g. %s)", n_low, n_high, pinned[:5])
    return TokenWeightTable(dict(zip(vocab, w.tolist())), 1.0, 0, False, bounds)


def lookup_weights(table: TokenWeightTable, seq: TokenSequence | tuple[str, ...]) -> np.ndarray:
    tokens = seq.tokens if isinstance(seq, TokenSequence) else seq
    return np.array([table[t] for t in tokens], dtype=np.float64)
