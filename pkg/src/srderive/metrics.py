"""Evaluation kernels: self-information, (Self-)BLEU, vocabulary size,
retrieval accuracy, ICC(2,k), Welch's t-test and sample sizes."""

from __future__ import annotations

import logging
import math
import re
from collections import Counter
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Any

import numpy as np

from ._stats import f_sf, t_two_sided_p
from .errors import DegenerateInputError, InvalidInputError
from .gateway import LmScorer, token_logprobs
from .text import tokenize

logger = logging.getLogger(__name__)

LN2 = math.log(2.0)


# ---------------------------------------------------------------- self-information


def self_information(sr_text: str, scorer: LmScorer, in_scope: bool = True) -> float:
    """-log2 p(text) under ``scorer``, unconditioned; 0 for out-of-scope SRs."""
    if not in_scope:
        return 0.0
    if not sr_text.strip():
        raise InvalidInputError("cannot score an empty SR")
    lps = token_logprobs(scorer, sr_text)
    return -math.fsum(lp for _, lp in lps) / LN2


@dataclass(frozen=True)
class ScoredSr:
    sr_ref: Any
    in_scope: bool
    si_bits: float

    def __post_init__(self) -> None:
        if not self.in_scope and self.si_bits != 0:
            raise InvalidInputError("out-of-scope SR must carry SI 0")
        if self.si_bits < 0:
            raise InvalidInputError("SI cannot be negative")


def score_self_information(items: Sequence[tuple[Any, str, bool]], scorer: LmScorer
                           ) -> list[ScoredSr]:
    """``items`` are (ref, text, in_scope) triples."""
    return [ScoredSr(ref, ok, self_information(text, scorer, ok)) for ref, text, ok in items]


# ---------------------------------------------------------------- BLEU


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: str | Sequence[str], references: Sequence[str | Sequence[str]],
         max_n: int = 4, smoothing_epsilon: float = 1e-9) -> float:
    """Sentence BLEU with uniform weights, clipped counts and brevity penalty.

    A zero clipped count at order n contributes epsilon / (candidate n-gram
    count), or epsilon itself when the candidate has no n-grams of that order.
    The reference length used for the brevity penalty is the closest one
    (shorter wins ties).
    """
    cand = tokenize(candidate).tokens if isinstance(candidate, str) else tuple(candidate)
    refs = [tokenize(r).tokens if isinstance(r, str) else tuple(r) for r in references]
    if not cand:
        raise InvalidInputError("candidate has no tokens")
    if not refs:
        raise InvalidInputError("at least one reference is required")
    log_p = 0.0
    for n in range(1, max_n + 1):
        counts = _ngrams(cand, n)
        total = sum(counts.values())
        max_ref: Counter = Counter()
        for r in refs:
            max_ref |= _ngrams(r, n)
        clipped = sum(min(c, max_ref[g]) for g, c in counts.items())
        if total == 0:
            p = smoothing_epsilon
        elif clipped == 0:
            p = smoothing_epsilon / total
        else:
            p = clipped / total
        log_p += math.log(p) / max_n
    c = len(cand)
    r = min((len(ref) for ref in refs), key=lambda L: (abs(L - c), L))
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p)


@dataclass(frozen=True)
class SelfBleuItem:
    fr_id: str
    sr_ref: Any
    in_scope: bool
    value: float


@dataclass
class SelfBleuReport:
    items: list[SelfBleuItem]
    excluded_frs: list[str] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return math.fsum(i.value for i in self.items) / len(self.items)

    @property
    def values(self) -> list[float]:
        return [i.value for i in self.items]


@dataclass(frozen=True)
class SrItem:
    ref: Any
    text: str
    in_scope: bool = True


def _natural(text: str) -> tuple:
    return tuple(int(p) if p.isdigit() else p for p in re.split(r"(\d+)", text))


def self_bleu(per_fr_srs: Mapping[str, Sequence[SrItem]], seed: int = 0, *, max_n: int = 4,
              smoothing_epsilon: float = 1e-9) -> SelfBleuReport:
    """One SR drawn per FR (seeded, FRs in natural id order); each scored
    against all the other drawn SRs. Out-of-scope draws score 1."""
    rng = np.random.Generator(np.random.PCG64(seed))
    chosen: list[tuple[str, SrItem]] = []
    excluded = []
    for fr_id in sorted(per_fr_srs, key=_natural):
        srs = per_fr_srs[fr_id]
        if not srs:
            logger.warning("FR %s has no SRs; left out of Self-BLEU", fr_id)
            excluded.append(fr_id)
            continue
        chosen.append((fr_id, srs[int(rng.integers(len(srs)))]))
    if len(chosen) < 2:
        raise InvalidInputError("Self-BLEU needs SRs from at least two FRs")
    items = []
    for i, (fr_id, item) in enumerate(chosen):
        if not item.in_scope:
            value = 1.0
        else:
            others = [o.text for j, (_, o) in enumerate(chosen) if j != i]
            value = bleu(item.text, others, max_n, smoothing_epsilon)
        items.append(SelfBleuItem(fr_id, item.ref, item.in_scope, value))
    return SelfBleuReport(items, excluded)


def vocabulary_size(srs: Sequence[str], in_scope: Sequence[bool] | None = None) -> int:
    """Distinct tokens over the in-scope SRs."""
    if in_scope is None:
        in_scope = [True] * len(srs)
    if len(in_scope) != len(srs):
        raise InvalidInputError("scope flags do not align with SRs")
    vocab: set[str] = set()
    for text, ok in zip(srs, in_scope):
        if ok:
            vocab.update(tokenize(text).tokens)
    return len(vocab)


# ---------------------------------------------------------------- retrieval accuracy


@dataclass(frozen=True)
class AccuracyReport:
    per_project: dict[str, tuple[int, int]]

    def accuracy(self, project: str) -> float:
        rel, tot = self.per_project[project]
        return rel / tot

    @property
    def overall(self) -> float:
        rel = sum(r for r, _ in self.per_project.values())
        tot = sum(t for _, t in self.per_project.values())
        return rel / tot

    def to_dict(self) -> dict[str, Any]:
        out = {p: {"relevant": r, "total": t, "accuracy": r / t}
               for p, (r, t) in sorted(self.per_project.items())}
        out["overall"] = {"relevant": sum(r for r, _ in self.per_project.values()),
                          "total": sum(t for _, t in self.per_project.values()),
                          "accuracy": self.overall}
        return out


def retrieval_accuracy(labels: Sequence[tuple[str, bool]]) -> AccuracyReport:
    """``labels`` are (project, relevant) for each judged FR-VR pair."""
    if not labels:
        raise InvalidInputError("no labelled pairs")
    acc: dict[str, list[int]] = {}
    for project, relevant in labels:
        if not isinstance(relevant, (bool, np.bool_)):
            raise InvalidInputError(f"unlabelled pair in project {project}")
        slot = acc.setdefault(project, [0, 0])
        slot[0] += int(relevant)
        slot[1] += 1
    return AccuracyReport({p: (r, t) for p, (r, t) in acc.items()})


# ---------------------------------------------------------------- ICC and Welch


@dataclass(frozen=True)
class IccResult:
    icc: float
    f_statistic: float
    df1: int
    df2: int
    p_value: float
    ms_rows: float
    ms_cols: float
    ms_error: float
    design: str = "ICC(2,k) consistency"


def icc_2k(ratings: Sequence[Sequence[float]] | np.ndarray) -> IccResult:
    """Two-way ANOVA on an (n subjects x k raters) matrix, average-measures consistency."""
    x = np.asarray(ratings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise InvalidInputError("need at least 2 subjects and 2 raters")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("ratings contain missing or non-finite cells")
    n, k = x.shape
    gm = x.mean()
    ss_total = float(((x - gm) ** 2).sum())
    ss_rows = float(k * ((x.mean(axis=1) - gm) ** 2).sum())
    ss_cols = float(n * ((x.mean(axis=0) - gm) ** 2).sum())
    ss_err = ss_total - ss_rows - ss_cols
    if abs(ss_err) <= 1e-12 * max(ss_total, 1.0):
        ss_err = 0.0
    df1, df2 = n - 1, (n - 1) * (k - 1)
    ms_rows, ms_cols, ms_err = ss_rows / df1, ss_cols / (k - 1), ss_err / df2
    if ms_rows <= 1e-15 * max(ss_total, 1.0):
        raise DegenerateInputError("no between-subject variance; ICC is undefined")
    icc = (ms_rows - ms_err) / ms_rows
    if ms_err == 0:
        f, p = math.inf, 0.0
    else:
        f = ms_rows / ms_err
        p = f_sf(f, df1, df2)
    return IccResult(icc, f, df1, df2, p, ms_rows, ms_cols, ms_err)


@dataclass(frozen=True)
class WelchResult:
    t: float
    df: float
    p_value: float
    mean_a: float
    mean_b: float


def welch_t(a: Sequence[float], b: Sequence[float]) -> WelchResult:
    xa, xb = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if xa.size < 2 or xb.size < 2:
        raise InvalidInputError("each sample needs at least 2 values")
    va, vb = xa.var(ddof=1), xb.var(ddof=1)
    if va == 0 and vb == 0:
        raise DegenerateInputError("both samples have zero variance")
    sa, sb = va / xa.size, vb / xb.size
    se = math.sqrt(sa + sb)
    t = (xa.mean() - xb.mean()) / se
    df = (sa + sb) ** 2 / (sa ** 2 / (xa.size - 1) + sb ** 2 / (xb.size - 1))
    return WelchResult(float(t), float(df), t_two_sided_p(float(t), float(df)),
                       float(xa.mean()), float(xb.mean()))


# ---------------------------------------------------------------- sampling


@dataclass(frozen=True)
class SampleSizeSpec:
    population: int | None = None
    confidence: float = 0.95
    margin: float = 0.05
    proportion: float = 0.5

    def __post_init__(self) -> None:
        if self.population is not None and self.population < 1:
            raise InvalidInputError("population must be positive or None")
        if not 0 < self.confidence < 1:
            raise InvalidInputError("confidence must lie in (0, 1)")
        if not 0 < self.margin < 1:
            raise InvalidInputError("margin must lie in (0, 1)")
        if not 0 < self.proportion < 1:
            raise InvalidInputError("proportion must lie in (0, 1)")


def min_sample_size(spec: SampleSizeSpec) -> int:
    """Cochran's n0 = z^2 p (1 - p) / e^2, with the finite-population correction."""
    z = NormalDist().inv_cdf(1.0 - (1.0 - spec.confidence) / 2.0)
    n0 = z * z * spec.proportion * (1.0 - spec.proportion) / (spec.margin ** 2)
    n = n0 if spec.population is None else n0 / (1.0 + (n0 - 1.0) / spec.population)
    # guard against values like 212.0000000001 from rounding
    size = math.ceil(n - 1e-9)
    if spec.population is not None:
        size = min(size, spec.population)
    return max(size, 1)


def sample_without_replacement(population: Sequence[Any], n: int, seed: int = 0) -> list[Any]:
    if not 0 <= n <= len(population):
        raise InvalidInputError(f"cannot draw {n} from {len(population)} items")
    rng = np.random.Generator(np.random.PCG64(seed))
    return [population[i] for i in rng.choice(len(population), size=n, replace=False)]
