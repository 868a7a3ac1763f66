"""Synthetic FR generation per VR, zero-shot rank filtering and train/val split."""

from __future__ import annotations

import json
import logging
import math
import re
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from .corpus import VrCorpus, VrRecord, vr_sort_key
from .errors import (
    InvalidInputError,
    ParseError,
    QueryError,
    SrDeriveError,
    SynthesisParseError,
    TemplateError,
)
from .gateway import ChatClient, ChatRequest, ChatResponse, Message, run_bounded
from .retriever import VrIndex, rank_order

logger = logging.getLogger(__name__)

BAD_CATEGORIES = ("not-functional", "too-abstract", "reveals-vr")


def load_asset(name: str, path: str | Path | None = None) -> dict[str, Any]:
    try:
        if path is None:
            raw = resources.files("srderive.data").joinpath("prompts", name).read_text("utf-8")
        else:
            raw = Path(path).read_text("utf-8")
        return json.loads(raw)
    except (OSError, json.JSONDecodeError) as exc:
        raise TemplateError(f"cannot read prompt asset {path or name}: {exc}") from exc


def _need(obj: Mapping[str, Any], key: str, where: str) -> Any:
    value = obj.get(key) if isinstance(obj, Mapping) else None
    if value in (None, "", [], {}):
        raise TemplateError(f"{where}: missing {key!r}", slot=f"{where}.{key}" if where else key)
    return value


@dataclass(frozen=True)
class Exemplar:
    vr: str
    fr: str
    reason: str
    category: str = "good"


@dataclass(frozen=True)
class SynthesisTemplate:
    template_id: str
    system: str
    instruction: str
    good_example: Exemplar
    bad_examples: tuple[Exemplar, Exemplar, Exemplar]
    example_format: str

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SynthesisTemplate:
        instruction = _need(data, "instruction", "")
        for slot in ("{count_phrase}", "{target_vr}", "{examples}"):
            if slot not in instruction:
                raise TemplateError(f"instruction lacks {slot}", slot=slot.strip("{}"))
        good = _need(data, "good_example", "")
        bads = _need(data, "bad_examples", "")
        if not isinstance(bads, list) or len(bads) != 3:
            raise TemplateError("exactly three bad examples are required", slot="bad_examples")
        bad_ex = []
        for i, b in enumerate(bads):
            where = f"bad_examples[{i}]"
            bad_ex.append(Exemplar(_need(b, "vr", where), _need(b, "fr", where),
                                   _need(b, "reason", where), _need(b, "category", where)))
        cats = sorted(e.category for e in bad_ex)
        if cats != sorted(BAD_CATEGORIES):
            raise TemplateError(f"bad examples must cover {BAD_CATEGORIES}, got {cats}",
                                slot="bad_examples")
        fmt = data.get("example_format", "{label} example\nVR: {vr}\nFR: {fr}\nWhy: {reason}")
        return cls(str(_need(data, "template_id", "")), str(data.get("system", "")), instruction,
                   Exemplar(_need(good, "vr", "good_example"), _need(good, "fr", "good_example"),
                            _need(good, "reason", "good_example")),
                   tuple(bad_ex), fmt)

    @classmethod
    def load(cls, path: str | Path | None = None) -> SynthesisTemplate:
        return cls.from_dict(load_asset("synthesis.json", path))


@dataclass(frozen=True)
class SynthesisPrompt:
    template_id: str
    vr_id: str
    target_vr: str
    requested_count: int
    messages: tuple[Message, ...]

    @property
    def text(self) -> str:
        return self.messages[-1].content


def build_synthesis_prompt(vr: VrRecord, template: SynthesisTemplate, count: int) -> SynthesisPrompt:
    if count < 1:
        raise InvalidInputError("count must be at least 1")
    blocks = [template.example_format.format(label="Good", vr=template.good_example.vr,
                                             fr=template.good_example.fr,
                                             reason=template.good_example.reason)]
    for i, b in enumerate(template.bad_examples, 1):
        blocks.append(template.example_format.format(label=f"Bad ({i})", vr=b.vr, fr=b.fr,
                                                     reason=b.reason))
    count_phrase = ("exactly 1 functional requirement (FR)" if count == 1
                    else f"exactly {count} distinct functional requirements (FRs)")
    user = template.instruction.format(count_phrase=count_phrase, target_vr=vr.composed_text,
                                       examples="\n\n".join(blocks))
    msgs = ((Message("system", template.system),) if template.system else ()) + \
        (Message("user", user),)
    return SynthesisPrompt(template.template_id, vr.id, vr.composed_text, count, msgs)


_MARKED = re.compile(r"^\s*(?:\d+\s*[.)]|[-*•])\s+(.*\S)\s*$")


def parse_list(raw: str, expected: int | None = None) -> list[str]:
    """Items of a numbered ("1." / "1)"), bulleted ("-", "*") or one-per-line list.

    If any line carries a marker, only marked lines count (preamble and
    closing remarks are dropped). Unmarked text is split per line, but a
    single unmarked line is prose unless exactly one item was asked for.
    """
    lines = [ln for ln in raw.splitlines() if ln.strip()]
    marked = [m.group(1) for ln in lines if (m := _MARKED.match(ln))]
    if marked:
        return marked
    if len(lines) >= 2 or (len(lines) == 1 and expected == 1):
        return [ln.strip() for ln in lines]
    raise SynthesisParseError("response has no list structure", raw)


@dataclass(frozen=True)
class CandidatePair:
    fr_text: str
    vr_id: str
    provenance: str = "synthetic"
    batch_id: str = ""
    item_index: int = 0

    def __post_init__(self) -> None:
        if not self.fr_text.strip():
            raise InvalidInputError("candidate FR text is empty")
        if self.provenance not in ("synthetic", "manual"):
            raise InvalidInputError(f"unknown provenance {self.provenance!r}")


def _pairs_from_response(vr: VrRecord, count: int, resp: ChatResponse, batch_id: str) -> list[CandidatePair]:
    items = parse_list(resp.content, count)
    if len(items) < count:
        logger.warning("VR %s: asked for %d FRs, got %d", vr.id, count, len(items))
    elif len(items) > count:
        logger.warning("VR %s: asked for %d FRs, got %d; keeping the first %d",
                       vr.id, count, len(items), count)
        items = items[:count]
    return [CandidatePair(t, vr.id, "synthetic", batch_id, i) for i, t in enumerate(items)]


def synthesis_request(vr: VrRecord, count: int, template: SynthesisTemplate, model_id: str,
                      seed: int | None = 0, temperature: float = 0.0) -> ChatRequest:
    prompt = build_synthesis_prompt(vr, template, count)
    return ChatRequest(model_id, prompt.messages, temperature, seed, tag=vr.id)


def synthesize_frs(vr: VrRecord, count: int, gateway: ChatClient, *,
                   template: SynthesisTemplate | None = None, model_id: str = "gpt-4",
                   seed: int | None = 0, batch_id: str = "") -> list[CandidatePair]:
    template = template or SynthesisTemplate.load()
    resp = gateway.chat(synthesis_request(vr, count, template, model_id, seed))
    return _pairs_from_response(vr, count, resp, batch_id or vr.id)


@dataclass
class SynthesisRun:
    pairs: list[CandidatePair]
    failures: list[tuple[str, str]]


def synthesize_corpus(corpus: VrCorpus, count: int, gateway: ChatClient, *,
                      template: SynthesisTemplate | None = None, model_id: str = "gpt-4",
                      seed: int | None = 0, deterministic: bool = True) -> SynthesisRun:
    """Synthesize for every VR; output ordered by (vr id, item index)."""
    template = template or SynthesisTemplate.load()
    vrs = sorted(corpus.records, key=lambda r: vr_sort_key(r.id))
    reqs = [synthesis_request(v, count, template, model_id, seed) for v in vrs]
    pairs, failures = [], []
    for vr, res in zip(vrs, run_bounded(gateway, reqs, deterministic=deterministic)):
        if isinstance(res, SrDeriveError):
            failures.append((vr.id, f"{type(res).__name__}: {res}"))
            continue
        try:
            pairs.extend(_pairs_from_response(vr, count, res, vr.id))
        except SynthesisParseError as exc:
            logger.warning("VR %s: %s; raw response kept in failure ledger", vr.id, exc)
            failures.append((vr.id, f"SynthesisParseError: {exc}: {exc.raw!r}"))
    return SynthesisRun(pairs, failures)


# ---------------------------------------------------------------- rank filter


@dataclass(frozen=True)
class FilterDecision:
    pair: CandidatePair
    rank: int | None
    threshold_rank: int
    accepted: bool
    reason: str = ""


def threshold_rank(fraction: float, n: int) -> int:
    """ceil(fraction * n), computed on the decimal value of ``fraction``.

    Going through the shortest repr keeps 0.3 * 10 at exactly 3 rather than
    the float product 3.0000000000000004.
    """
    if not 0 < fraction <= 1:
        raise InvalidInputError("fraction must lie in (0, 1]")
    return math.ceil(Fraction(repr(float(fraction))) * n)


def is_zero_shot(index: VrIndex) -> bool:
    table = index.weight_table
    return table.default_weight == 1.0 and all(table[t] == 1.0 for t in index.vocabulary)


def rank_filter(pairs: Sequence[CandidatePair], zero_shot_index: VrIndex,
                fraction: float = 0.3) -> list[FilterDecision]:
    if not is_zero_shot(zero_shot_index):
        raise InvalidInputError("rank filter needs a zero-shot index (all weights 1.0)")
    n = len(zero_shot_index)
    thr = threshold_rank(fraction, n)
    pos = {v: i for i, v in enumerate(zero_shot_index.vr_ids)}
    cache: dict[str, list[int]] = {}
    out = []
    for p in pairs:
        if p.vr_id not in pos:
            raise InvalidInputError(f"pair references VR {p.vr_id} absent from the index")
        if p.fr_text not in cache:
            try:
                scores = zero_shot_index.score_all(zero_shot_index.embed_query(p.fr_text))
            except QueryError as exc:
                out.append(FilterDecision(p, None, thr, False, str(exc)))
                continue
            order = rank_order(zero_shot_index.vr_ids, scores)
            ranks = [0] * n
            for r, i in enumerate(order, 1):
                ranks[i] = r
            cache[p.fr_text] = ranks
        rank = cache[p.fr_text][pos[p.vr_id]]
        out.append(FilterDecision(p, rank, thr, rank <= thr))
    return out


def split_train_val(pairs: Sequence[Any], ratio: tuple[float, float] = (0.9, 0.1),
                    seed: int = 0) -> tuple[list[Any], list[Any]]:
    """Seeded shuffle, then the last floor(val_fraction * total) items go to validation."""
    tr, va = (Fraction(repr(float(x))) for x in ratio)
    if tr + va != 1 or tr <= 0 or va <= 0:
        raise InvalidInputError(f"ratio {ratio} must be two positive parts summing to 1")
    if len(pairs) < 10:
        raise InvalidInputError(f"need at least 10 pairs to split, got {len(pairs)}")
    n_val = math.floor(va * len(pairs))
    order = np.random.Generator(np.random.PCG64(seed)).permutation(len(pairs))
    shuffled = [pairs[i] for i in order]
    cut = len(pairs) - n_val
    return shuffled[:cut], shuffled[cut:]


# ---------------------------------------------------------------- persistence


def decision_record(d: FilterDecision) -> dict[str, Any]:
    rec = asdict(d.pair)
    rec.update(accepted=d.accepted, rank=d.rank, threshold_rank=d.threshold_rank)
    if d.reason:
        rec["reason"] = d.reason
    return rec


def write_jsonl(records: Iterable[Mapping[str, Any]], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n")


def read_pairs(path: str | Path, accepted_only: bool = False) -> list[CandidatePair]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if accepted_only and not obj.get("accepted", False):
                    continue
                out.append(CandidatePair(obj["fr_text"], obj["vr_id"],
                                         obj.get("provenance", "synthetic"),
                                         obj.get("batch_id", ""), int(obj.get("item_index", 0))))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"line {lineno}: {exc}", str(path)) from exc
    return out
