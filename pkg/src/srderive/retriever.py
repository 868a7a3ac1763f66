"""Token-weighted late-interaction retrieval over ASVS items.

score(FR, VR) = sum_i max_j (w_j * cos(fr_i, vr_j)); weights multiply
before the max and the sum runs over FR tokens. Only the weight table is
trainable; token embeddings come from a frozen provider.
"""

from __future__ import annotations

import json
import logging
import math
import os
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np

from .corpus import FrRecord, VrCorpus, vr_sort_key
from .errors import (
    EmptyDocumentError,
    IndexBuildError,
    IndexLoadError,
    InvalidInputError,
    QueryError,
    SrDeriveError,
)
from .text import EmbeddingProvider, TokenEmbeddings, embed, tokenize
from .weighting import TokenWeightTable, lookup_weights

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


def score_from_cosines(cos: np.ndarray, weights: np.ndarray) -> float:
    """Score from an (m, n) cosine matrix and n document-token weights."""
    cos = np.asarray(cos, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if cos.ndim != 2 or cos.shape[1] != weights.shape[0]:
        raise InvalidInputError(f"cosine matrix {cos.shape} does not match {weights.shape[0]} weights")
    if cos.shape[1] == 0:
        raise EmptyDocumentError("document has no tokens")
    if cos.shape[0] == 0:
        raise InvalidInputError("query has no tokens")
    return float(np.sum(np.max(cos * weights[None, :], axis=1)))


def score(fr_emb: TokenEmbeddings | np.ndarray, vr_emb: TokenEmbeddings | np.ndarray,
          vr_weights: Sequence[float] | np.ndarray) -> float:
    fr = fr_emb.matrix if isinstance(fr_emb, TokenEmbeddings) else np.asarray(fr_emb)
    vr = vr_emb.matrix if isinstance(vr_emb, TokenEmbeddings) else np.asarray(vr_emb)
    w = np.asarray(vr_weights, dtype=np.float64)
    if vr.shape[0] == 0 or w.size == 0:
        raise EmptyDocumentError("document has no tokens")
    if w.shape[0] != vr.shape[0]:
        raise InvalidInputError(f"{w.shape[0]} weights for {vr.shape[0]} document tokens")
    return score_from_cosines(fr.astype(np.float64) @ vr.astype(np.float64).T, w)


@dataclass(frozen=True)
class IndexManifest:
    format_version: int
    provider_id: str
    dim: int
    corpus_hash: str
    table_version: int
    corpus_version: str
    n_vrs: int
    max_tokens: int | None = None
    built_at: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


@dataclass(frozen=True)
class RetrievalResult:
    vr_id: str
    score: float
    rank: int


@dataclass(frozen=True, eq=False)
class VrIndex:
    """Immutable precomputed index.

    ``embeddings`` stacks every VR's token rows (float32, row-major);
    ``offsets[vr_id] = (row_start, n)``. ``provider`` embeds queries and is
    not persisted.
    """

    vr_ids: tuple[str, ...]
    tokens: dict[str, tuple[str, ...]]
    embeddings: np.ndarray
    offsets: dict[str, tuple[int, int]]
    weight_table: TokenWeightTable
    manifest: IndexManifest
    provider: EmbeddingProvider = field(repr=False)
    _pad_emb: np.ndarray = field(init=False, repr=False)
    _pad_tok: np.ndarray = field(init=False, repr=False)
    _pad_mask: np.ndarray = field(init=False, repr=False)
    _vocab: tuple[str, ...] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not self.vr_ids:
            raise InvalidInputError("index must contain at least one VR")
        nmax = max(self.offsets[v][1] for v in self.vr_ids)
        N, d = len(self.vr_ids), self.embeddings.shape[1]
        pad = np.zeros((N, nmax, d), dtype=np.float64)
        mask = np.zeros((N, nmax), dtype=bool)
        vocab = sorted({t for v in self.vr_ids for t in self.tokens[v]})
        tok_id = {t: i for i, t in enumerate(vocab)}
        toks = np.full((N, nmax), -1, dtype=np.int64)
        for r, v in enumerate(self.vr_ids):
            start, n = self.offsets[v]
            pad[r, :n] = self.embeddings[start:start + n]
            mask[r, :n] = True
            toks[r, :n] = [tok_id[t] for t in self.tokens[v]]
        self.embeddings.setflags(write=False)
        object.__setattr__(self, "_pad_emb", pad)
        object.__setattr__(self, "_pad_mask", mask)
        object.__setattr__(self, "_pad_tok", toks)
        object.__setattr__(self, "_vocab", tuple(vocab))

    def __len__(self) -> int:
        return len(self.vr_ids)

    @property
    def vocabulary(self) -> tuple[str, ...]:
        return self._vocab

    def vr_embeddings(self, vr_id: str) -> TokenEmbeddings:
        start, n = self.offsets[vr_id]
        return TokenEmbeddings(self.embeddings[start:start + n].astype(np.float64),
                               self.manifest.provider_id)

    def vr_weights(self, vr_id: str, table: TokenWeightTable | None = None) -> np.ndarray:
        return lookup_weights(table or self.weight_table, self.tokens[vr_id])

    def padded_weights(self, table: TokenWeightTable | None = None) -> np.ndarray:
        table = table or self.weight_table
        per_tok = np.array([table[t] for t in self._vocab], dtype=np.float64)
        w = np.where(self._pad_mask, per_tok[np.maximum(self._pad_tok, 0)], 0.0)
        return w

    def with_table(self, table: TokenWeightTable) -> VrIndex:
        return VrIndex(self.vr_ids, self.tokens, self.embeddings, self.offsets, table,
                       replace(self.manifest, table_version=table.version), self.provider)

    def embed_query(self, text: str) -> TokenEmbeddings:
        seq = tokenize(text).truncated(self.manifest.max_tokens)
        if len(seq) == 0:
            raise QueryError(f"query {text[:40]!r} has no tokens")
        return embed(self.provider, seq)

    def score_all(self, query: TokenEmbeddings | np.ndarray,
                  table: TokenWeightTable | None = None) -> np.ndarray:
        """Scores of one query against every VR, in ``vr_ids`` order."""
        q = query.matrix if isinstance(query, TokenEmbeddings) else np.asarray(query, np.float64)
        w = self.padded_weights(table)
        cos = np.einsum("md,Nnd->Nmn", q, self._pad_emb, optimize=True)
        weighted = np.where(self._pad_mask[:, None, :], cos * w[:, None, :], -np.inf)
        return weighted.max(axis=2).sum(axis=1)


def rank_order(vr_ids: Sequence[str], scores: np.ndarray) -> list[int]:
    """Positions sorted by descending score, ties by ascending natural vr id."""
    return sorted(range(len(vr_ids)), key=lambda i: (-scores[i], vr_sort_key(vr_ids[i])))


def _query_text(fr: FrRecord | str) -> str:
    return fr.text if isinstance(fr, FrRecord) else fr


def retrieve_top_k(index: VrIndex, fr: FrRecord | str, k: int,
                   table: TokenWeightTable | None = None) -> list[RetrievalResult]:
    if not 1 <= k <= len(index):
        raise InvalidInputError(f"k={k} must lie in [1, {len(index)}]")
    scores = index.score_all(index.embed_query(_query_text(fr)), table)
    order = rank_order(index.vr_ids, scores)[:k]
    return [RetrievalResult(index.vr_ids[i], float(scores[i]), r) for r, i in enumerate(order, 1)]


def rank_of(index: VrIndex, fr: FrRecord | str, vr_id: str,
            table: TokenWeightTable | None = None) -> int:
    """1-based rank of ``vr_id`` in the full ranking for ``fr``."""
    full = retrieve_top_k(index, fr, len(index), table)
    for res in full:
        if res.vr_id == vr_id:
            return res.rank
    raise KeyError(vr_id)


def build_index(corpus: VrCorpus, provider: EmbeddingProvider, table: TokenWeightTable, *,
                max_tokens: int | None = None, deterministic: bool = True) -> VrIndex:
    if len(corpus) == 0:
        raise InvalidInputError("cannot index an empty corpus")
    records = sorted(corpus.records, key=lambda r: vr_sort_key(r.id))
    rows, offsets, tokens = [], {}, {}
    start = 0
    for done, r in enumerate(records):
        seq = tokenize(r.composed_text).truncated(max_tokens)
        try:
            emb = embed(provider, seq)
        except SrDeriveError as exc:
            raise IndexBuildError(f"aborted at VR {r.id}: {exc}", done, len(records)) from exc
        rows.append(emb.matrix.astype(np.float32))
        offsets[r.id] = (start, len(seq))
        tokens[r.id] = seq.tokens
        start += len(seq)
    manifest = IndexManifest(
        FORMAT_VERSION, provider.provider_id, provider.dim, corpus.content_hash(),
        table.version, corpus.source_version, len(records), max_tokens,
        None if deterministic else datetime.now(timezone.utc).isoformat(timespec="seconds"))
    return VrIndex(tuple(r.id for r in records), tokens, np.vstack(rows), offsets,
                   table, manifest, provider)


def save_index(index: VrIndex, path: str | Path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)

    def write(name: str, text: str) -> None:
        tmp = out / (name + ".tmp")
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, out / name)

    tmp = out / "embeddings.bin.tmp"
    tmp.write_bytes(np.ascontiguousarray(index.embeddings, dtype="<f4").tobytes())
    os.replace(tmp, out / "embeddings.bin")
    write("offsets.json", json.dumps({v: list(index.offsets[v]) for v in index.vr_ids}, indent=1))
    write("tokens.json", json.dumps({v: list(index.tokens[v]) for v in index.vr_ids}, indent=1))
    write("weights.json", index.weight_table.to_json())
    write("manifest.json", json.dumps(index.manifest.to_dict(), indent=1, sort_keys=True))
    return out


def _read_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text("utf-8"))
    except FileNotFoundError as exc:
        raise IndexLoadError("missing", path.name) from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise IndexLoadError(f"unreadable JSON: {exc}", path.name) from exc


def load_index(path: str | Path, provider: EmbeddingProvider, *,
               corpus: VrCorpus | None = None) -> VrIndex:
    """Load a saved index, refusing anything inconsistent.

    ``corpus``, if given, must hash to the manifest's corpus hash.
    """
    base = Path(path)
    raw = _read_json(base / "manifest.json")
    try:
        manifest = IndexManifest(**raw)
    except TypeError as exc:
        raise IndexLoadError(f"bad manifest fields: {exc}", "manifest.json") from exc
    if manifest.format_version != FORMAT_VERSION:
        raise IndexLoadError(f"format version {manifest.format_version} != {FORMAT_VERSION}",
                             "manifest.json")
    if corpus is not None and corpus.content_hash() != manifest.corpus_hash:
        raise IndexLoadError("corpus hash does not match the corpus in use", "manifest.json")
    if provider.provider_id != manifest.provider_id or provider.dim != manifest.dim:
        raise IndexLoadError(f"index built with {manifest.provider_id}, got {provider.provider_id}",
                             "manifest.json")

    offsets_raw = _read_json(base / "offsets.json")
    tokens_raw = _read_json(base / "tokens.json")
    try:
        table = TokenWeightTable.from_dict(_read_json(base / "weights.json"))
    except SrDeriveError as exc:
        raise IndexLoadError(str(exc), "weights.json") from exc
    blob = base / "embeddings.bin"
    if not blob.exists():
        raise IndexLoadError("missing", "embeddings.bin")
    data = blob.read_bytes()
    row_bytes = 4 * manifest.dim
    if len(data) % row_bytes:
        raise IndexLoadError(f"size {len(data)} is not a multiple of {row_bytes}", "embeddings.bin")
    emb = np.frombuffer(data, dtype="<f4").reshape(-1, manifest.dim).astype(np.float32)

    if not isinstance(offsets_raw, dict) or not isinstance(tokens_raw, dict):
        raise IndexLoadError("expected an object", "offsets.json")
    offsets: dict[str, tuple[int, int]] = {}
    expected = 0
    for vid, span in offsets_raw.items():
        if (not isinstance(span, list) or len(span) != 2
                or not all(isinstance(x, int) and x >= 0 for x in span)):
            raise IndexLoadError(f"bad span for {vid}: {span!r}", "offsets.json")
        start, n = span
        if start != expected or n < 1:
            raise IndexLoadError(f"span for {vid} is not contiguous", "offsets.json")
        expected += n
        toks = tokens_raw.get(vid)
        if not isinstance(toks, list) or len(toks) != n:
            raise IndexLoadError(f"token list for {vid} does not match span length", "tokens.json")
        offsets[vid] = (start, n)
    if expected != emb.shape[0]:
        raise IndexLoadError(f"offsets cover {expected} rows, file has {emb.shape[0]}",
                             "embeddings.bin")
    if len(offsets) != manifest.n_vrs or set(tokens_raw) != set(offsets):
        raise IndexLoadError("VR ids disagree between manifest, offsets and tokens", "offsets.json")
    if table.version != manifest.table_version:
        raise IndexLoadError("weight table version does not match manifest", "weights.json")
    vr_ids = tuple(sorted(offsets, key=vr_sort_key))
    tokens = {v: tuple(tokens_raw[v]) for v in vr_ids}
    return VrIndex(vr_ids, tokens, emb, offsets, table, manifest, provider)


# --------------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 6e-7
    epochs: int = 1
    batch_size: int = 32
    seed: int = 0
    temperature: float = 1.0
    # extra VRs sampled per batch into the softmax denominator; 0 = pure in-batch
    random_negatives: int = 0
    eval_k: int = 5
    patience: int | None = None
    # recorded only: the encoder is frozen
    backbone_learning_rate: float = 3e-5

    def __post_init__(self) -> None:
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise InvalidInputError("learning rate must be finite and >= 0")
        if self.batch_size < 2:
            raise InvalidInputError("batch size must be at least 2")
        if self.epochs < 1:
            raise InvalidInputError("epochs must be at least 1")
        if self.temperature <= 0:
            raise InvalidInputError("temperature must be positive")
        if self.random_negatives < 0:
            raise InvalidInputError("random_negatives must be >= 0")


@dataclass
class TrainReport:
    epoch_losses: list[float]
    val_top_k: list[float]
    final_table_version: int
    steps: int
    epochs_run: int
    stopped_early: str | None = None
    config: dict[str, Any] = field(default_factory=dict)

    @property
    def val_metric(self) -> float | None:
        return self.val_top_k[-1] if self.val_top_k else None

    def to_dict(self) -> dict[str, Any]:
        return {
            "epoch_losses": self.epoch_losses,
            "val_top_k": self.val_top_k,
            "final_table_version": self.final_table_version,
            "steps": self.steps,
            "epochs_run": self.epochs_run,
            "stopped_early": self.stopped_early,
            "config": self.config,
        }


@dataclass(frozen=True)
class TrainExample:
    """One FR (already embedded) with its gold VR."""

    fr: np.ndarray
    vr_id: str


def make_examples(index: VrIndex, pairs: Iterable[Any]) -> list[TrainExample]:
    """Accepts (fr_text, vr_id) tuples or objects with ``fr_text``/``vr_id``."""
    out = []
    for p in pairs:
        fr_text, vr_id = (p.fr_text, p.vr_id) if hasattr(p, "vr_id") else p
        if vr_id not in index.offsets:
            raise InvalidInputError(f"training pair references unknown VR {vr_id}")
        out.append(TrainExample(index.embed_query(fr_text).matrix, vr_id))
    return out


def _argmax_hits(cos: np.ndarray, w: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Score plus, per FR token, the winning document position and its cosine.

    np.argmax returns the first maximum, i.e. ties go to the lowest j.
    """
    weighted = cos * w[None, :]
    j = np.argmax(weighted, axis=1)
    rows = np.arange(cos.shape[0])
    return float(weighted[rows, j].sum()), j, cos[rows, j]


def loss_and_grad(batch: Sequence[TrainExample], index: VrIndex, table: TokenWeightTable, *,
                  temperature: float = 1.0,
                  extra_negatives: Sequence[str] = ()) -> tuple[float, dict[str, float]]:
    """In-batch softmax cross-entropy and its exact gradient w.r.t. token weights.

    logits[i, u] = score(FR_i, VR_u) / temperature over the distinct VRs u of
    the batch (plus ``extra_negatives``); loss = mean_i -log softmax_i[gold_i].
    d score / d w_t = sum over FR tokens whose argmax lands on a position
    holding token t of the cosine there.
    """
    if not batch:
        raise InvalidInputError("empty batch")
    columns: list[str] = []
    for ex in batch:
        if ex.vr_id not in columns:
            columns.append(ex.vr_id)
    if len(columns) < len(batch):
        logger.info("batch has %d duplicate gold VRs; collapsed in the softmax",
                       len(batch) - len(columns))
    for v in extra_negatives:
        if v not in columns:
            columns.append(v)
    col_of = {v: c for c, v in enumerate(columns)}
    vr_mats = [index.vr_embeddings(v).matrix for v in columns]
    vr_w = [lookup_weights(table, index.tokens[v]) for v in columns]

    B, U = len(batch), len(columns)
    logits = np.empty((B, U))
    hits: list[list[tuple[np.ndarray, np.ndarray]]] = []
    for i, ex in enumerate(batch):
        row = []
        for u in range(U):
            s, j, c = _argmax_hits(ex.fr @ vr_mats[u].T, vr_w[u])
            logits[i, u] = s / temperature
            row.append((j, c))
        hits.append(row)

    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    gold = np.array([col_of[ex.vr_id] for ex in batch])
    loss = float(np.mean(logz - shifted[np.arange(B), gold]))

    probs = np.exp(shifted - logz[:, None])
    g = probs.copy()
    g[np.arange(B), gold] -= 1.0
    g /= B * temperature

    grad: dict[str, float] = {t: 0.0 for v in columns for t in index.tokens[v]}
    for i in range(B):
        for u, v in enumerate(columns):
            if g[i, u] == 0.0:
                continue
            toks = index.tokens[v]
            j, c = hits[i][u]
            for jj, cc in zip(j.tolist(), c.tolist()):
                grad[toks[jj]] += g[i, u] * cc
    return loss, grad


def sgd_step(table: TokenWeightTable, grad: dict[str, float], lr: float) -> TokenWeightTable:
    lo, hi = table.bounds
    new = {t: min(hi, max(lo, table[t] - lr * gt)) for t, gt in grad.items()}
    return table.updated(new)


def top_k_rate(index: VrIndex, examples: Sequence[TrainExample], table: TokenWeightTable,
               k: int) -> float:
    """Fraction of examples whose gold VR ranks within the top k."""
    if not examples:
        return float("nan")
    hit = 0
    for ex in examples:
        scores = index.score_all(ex.fr, table)
        order = rank_order(index.vr_ids, scores)
        if index.vr_ids.index(ex.vr_id) in order[:k]:
            hit += 1
    return hit / len(examples)


def train_weights(index: VrIndex, pairs: Iterable[Any], config: TrainConfig = TrainConfig(),
                  val_pairs: Iterable[Any] = ()) -> tuple[TokenWeightTable, TrainReport]:
    """Mini-batch SGD on the weight table only; one table version per step."""
    train = make_examples(index, pairs)
    val = make_examples(index, val_pairs)
    if len(train) < 2:
        raise InvalidInputError("need at least two training pairs")
    rng = np.random.Generator(np.random.PCG64(config.seed))
    table = index.weight_table
    losses: list[float] = []
    val_rates: list[float] = []
    steps = 0
    best, stale, stopped = -1.0, 0, None
    epochs_run = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        epoch_loss, n_batches = 0.0, 0
        for b in range(0, len(order), config.batch_size):
            batch = [train[i] for i in order[b:b + config.batch_size]]
            negs: list[str] = []
            if config.random_negatives:
                gold = {ex.vr_id for ex in batch}
                pool = [v for v in index.vr_ids if v not in gold]
                take = min(config.random_negatives, len(pool))
                negs = [pool[i] for i in sorted(rng.choice(len(pool), take, replace=False))]
            loss, grad = loss_and_grad(batch, index, table, temperature=config.temperature,
                                       extra_negatives=negs)
            table = sgd_step(table, grad, config.learning_rate)
            epoch_loss += loss
            n_batches += 1
            steps += 1
        epochs_run += 1
        losses.append(epoch_loss / n_batches)
        if val:
            rate = top_k_rate(index, val, table, config.eval_k)
            val_rates.append(rate)
            logger.info("epoch %d loss %.6f val top-%d %.4f", epoch + 1, losses[-1],
                        config.eval_k, rate)
            if config.patience is not None:
                if rate > best:
                    best, stale = rate, 0
                else:
                    stale += 1
                    if stale >= config.patience:
                        stopped = f"no validation improvement for {stale} epochs"
                        break
    report = TrainReport(losses, val_rates, table.version, steps, epochs_run, stopped,
                         dict(config.__dict__))
    return table, report
