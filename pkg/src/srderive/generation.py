"""Gated SR generation for retrieved FR/VR pairs, and duplicate consolidation."""

from __future__ import annotations

import json
import logging
import re
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .corpus import FrRecord, FrSet, VrCorpus, VrRecord
from .errors import GenerationError, InvalidInputError, SrDeriveError, TemplateError
from .gateway import ChatClient, ChatRequest, ChatResponse, Message, run_bounded
from .retriever import VrIndex, retrieve_top_k
from .synthesis import load_asset
from .text import tokenize

logger = logging.getLogger(__name__)

DEFAULT_SENTINEL = "NOT_APPLICABLE"


@dataclass(frozen=True)
class GenerationTemplate:
    template_id: str
    system: str
    instruction: str
    relevant_example: tuple[str, str, str]
    irrelevant_example: tuple[str, str]
    example_format: str

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> GenerationTemplate:
        instruction = data.get("instruction") or ""
        for slot in ("{fr}", "{vr}", "{sentinel}", "{examples}"):
            if slot not in instruction:
                raise TemplateError(f"instruction lacks {slot}", slot=slot.strip("{}"))
        examples = data.get("examples")
        if not isinstance(examples, list) or len(examples) != 2:
            raise TemplateError("exactly two exemplars are required", slot="examples")
        kinds = sorted(str(e.get("kind")) for e in examples if isinstance(e, Mapping))
        if kinds != ["irrelevant", "relevant"]:
            raise TemplateError(f"need one relevant and one irrelevant exemplar, got {kinds}",
                                slot="examples")
        rel = next(e for e in examples if e["kind"] == "relevant")
        irr = next(e for e in examples if e["kind"] == "irrelevant")
        for key, ex in (("fr", rel), ("vr", rel), ("sr", rel), ("fr", irr), ("vr", irr)):
            if not ex.get(key):
                raise TemplateError(f"{ex['kind']} exemplar lacks {key!r}", slot=f"{ex['kind']}.{key}")
        if not data.get("template_id"):
            raise TemplateError("missing template_id", slot="template_id")
        return cls(str(data["template_id"]), str(data.get("system", "")), instruction,
                   (rel["fr"], rel["vr"], rel["sr"]), (irr["fr"], irr["vr"]),
                   str(data.get("example_format", "FR: {fr}\nVR: {vr}\nSR: {sr}")))

    @classmethod
    def load(cls, path: str | Path | None = None) -> GenerationTemplate:
        return cls.from_dict(load_asset("generation.json", path))


@dataclass(frozen=True)
class GenerationPrompt:
    template_id: str
    fr_id: str
    vr_id: str
    sentinel: str
    messages: tuple[Message, ...]

    @property
    def text(self) -> str:
        return self.messages[-1].content


def build_generation_prompt(fr: FrRecord, vr: VrRecord, template: GenerationTemplate,
                            sentinel: str = DEFAULT_SENTINEL) -> GenerationPrompt:
    if not sentinel.strip() or "\n" in sentinel:
        raise InvalidInputError("sentinel must be a single non-empty line")
    fmt = template.example_format
    examples = "\n\n".join([
        fmt.format(fr=template.relevant_example[0], vr=template.relevant_example[1],
                   sr=template.relevant_example[2]),
        fmt.format(fr=template.irrelevant_example[0], vr=template.irrelevant_example[1],
                   sr=sentinel),
    ])
    user = template.instruction.format(fr=fr.text, vr=vr.composed_text, sentinel=sentinel,
                                       examples=examples)
    msgs = ((Message("system", template.system),) if template.system else ()) + \
        (Message("user", user),)
    return GenerationPrompt(template.template_id, fr.id, vr.id, sentinel, msgs)


@dataclass(frozen=True)
class SrRecord:
    project: str
    fr_id: str
    vr_id: str
    gated: bool
    text: str
    raw_response: str
    rank: int = 0

    def __post_init__(self) -> None:
        if self.gated and self.text:
            raise InvalidInputError("gated record must have empty text")
        if not self.gated and not self.text.strip():
            raise InvalidInputError("generated record must have text")


def interpret_response(fr: FrRecord, vr_id: str, resp: ChatResponse, sentinel: str,
                       rank: int = 0) -> SrRecord:
    raw = resp.content
    body = raw.strip()
    if not body:
        raise GenerationError(f"empty response for ({fr.id}, {vr_id})")
    if body == sentinel:
        return SrRecord(fr.project, fr.id, vr_id, True, "", raw, rank)
    return SrRecord(fr.project, fr.id, vr_id, False, body, raw, rank)


def generation_request(fr: FrRecord, vr: VrRecord, template: GenerationTemplate, sentinel: str,
                       model_id: str, seed: int | None, temperature: float = 0.0) -> ChatRequest:
    prompt = build_generation_prompt(fr, vr, template, sentinel)
    return ChatRequest(model_id, prompt.messages, temperature, seed, tag=f"{fr.id}|{vr.id}")


def generate_sr(fr: FrRecord, vr: VrRecord, gateway: ChatClient, *,
                template: GenerationTemplate | None = None, sentinel: str = DEFAULT_SENTINEL,
                model_id: str = "gpt-4", seed: int | None = 0) -> SrRecord:
    template = template or GenerationTemplate.load()
    resp = gateway.chat(generation_request(fr, vr, template, sentinel, model_id, seed))
    return interpret_response(fr, vr.id, resp, sentinel)


@dataclass
class SrSet:
    project: str
    records: list[SrRecord]
    failures: list[dict[str, Any]] = field(default_factory=list)
    manifest: dict[str, Any] = field(default_factory=dict)

    @property
    def attempted(self) -> int:
        return len(self.records) + len(self.failures)

    @property
    def generated(self) -> list[SrRecord]:
        return [r for r in self.records if not r.gated]

    @property
    def gated(self) -> list[SrRecord]:
        return [r for r in self.records if r.gated]

    def counts(self) -> dict[str, int]:
        return {"attempted": self.attempted, "generated": len(self.generated),
                "gated": len(self.gated), "failed": len(self.failures)}


def derive_srs(frs: FrSet, index: VrIndex, corpus: VrCorpus, k: int, gateway: ChatClient, *,
               template: GenerationTemplate | None = None, sentinel: str = DEFAULT_SENTINEL,
               model_id: str = "gpt-4", seed: int | None = 0, failure_retries: int = 1,
               deterministic: bool = True) -> SrSet:
    """Retrieve top-k VRs per FR and attempt one SR per pair.

    Records are ordered by (FR position, rank). Pairs that still fail after
    ``failure_retries`` extra passes land in ``failures``.
    """
    if k < 1:
        raise InvalidInputError("k must be at least 1")
    if corpus.content_hash() != index.manifest.corpus_hash:
        raise InvalidInputError("corpus does not match the index it was built from")
    template = template or GenerationTemplate.load()
    work: list[tuple[int, FrRecord, VrRecord, int]] = []
    for pos, fr in enumerate(frs.records):
        for res in retrieve_top_k(index, fr, k):
            work.append((pos, fr, corpus.get(res.vr_id), res.rank))

    results: dict[int, SrRecord | SrDeriveError] = {}
    pending = list(range(len(work)))
    for attempt in range(failure_retries + 1):
        if not pending:
            break
        reqs = [generation_request(work[i][1], work[i][2], template, sentinel, model_id, seed)
                for i in pending]
        for i, res in zip(pending, run_bounded(gateway, reqs, deterministic=deterministic)):
            if isinstance(res, SrDeriveError):
                results[i] = res
                continue
            _, fr, vr, rank = work[i]
            try:
                results[i] = interpret_response(fr, vr.id, res, sentinel, rank)
            except GenerationError as exc:
                results[i] = exc
        pending = [i for i in pending if isinstance(results[i], SrDeriveError)]
        if pending and attempt < failure_retries:
            logger.info("retrying %d failed pairs", len(pending))

    records, failures = [], []
    for i in range(len(work)):
        r = results[i]
        if isinstance(r, SrRecord):
            records.append(r)
        else:
            _, fr, vr, rank = work[i]
            failures.append({"fr_id": fr.id, "vr_id": vr.id, "rank": rank,
                             "error": type(r).__name__, "message": str(r)})
    manifest = {
        "project": frs.project, "k": k, "model_id": model_id, "seed": seed,
        "sentinel": sentinel, "template_id": template.template_id,
        "client_id": getattr(gateway, "client_id", type(gateway).__name__),
        "provider_id": index.manifest.provider_id, "table_version": index.manifest.table_version,
        "corpus_hash": index.manifest.corpus_hash,
    }
    out = SrSet(frs.project, records, failures, manifest)
    manifest.update(out.counts())
    return out


def write_srset(srset: SrSet, directory: str | Path, extra_manifest: Mapping[str, Any] = ()) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "srs.jsonl").open("w", encoding="utf-8") as fh:
        for r in srset.records:
            fh.write(json.dumps({"project": r.project, "fr_id": r.fr_id, "vr_id": r.vr_id,
                                 "rank": r.rank, "gated": r.gated, "text": r.text,
                                 "raw_response": r.raw_response},
                                ensure_ascii=False, sort_keys=True) + "\n")
    manifest = dict(srset.manifest, failures=srset.failures, **dict(extra_manifest))
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True), "utf-8")
    return out


def read_srset(directory: str | Path) -> SrSet:
    base = Path(directory)
    manifest = json.loads((base / "manifest.json").read_text("utf-8"))
    records = []
    with (base / "srs.jsonl").open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                o = json.loads(line)
                records.append(SrRecord(o["project"], o["fr_id"], o["vr_id"], o["gated"],
                                        o["text"], o["raw_response"], o.get("rank", 0)))
    failures = manifest.pop("failures", [])
    return SrSet(manifest.get("project", ""), records, failures, manifest)


# ---------------------------------------------------------------- consolidation


def natural_key(text: str) -> tuple:
    return tuple(int(p) if p.isdigit() else p for p in re.split(r"(\d+)", text))


def jaccard(a: frozenset[str] | set[str], b: frozenset[str] | set[str]) -> float:
    union = a | b
    return len(a & b) / len(union) if union else 0.0


@dataclass(frozen=True)
class DuplicateGroup:
    representative: tuple[str, str]
    members: tuple[tuple[str, str], ...]
    similarities: tuple[float, ...]

    @property
    def min_similarity(self) -> float:
        return min(self.similarities)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def consolidate_duplicates(records: SrSet | Sequence[SrRecord],
                           threshold: float = 0.8) -> list[DuplicateGroup]:
    """Group generated SRs whose token-set Jaccard with a representative >= threshold.

    Records are visited in (fr_id, vr_id) natural order, so each group's
    representative is its lowest pair and the result does not depend on
    input order. Each record joins the first group it qualifies for.
    Only groups with two or more members are returned.
    """
    if not 0 < threshold <= 1:
        raise InvalidInputError("threshold must lie in (0, 1]")
    recs = records.records if isinstance(records, SrSet) else list(records)
    if not recs:
        raise InvalidInputError("nothing to consolidate")
    live = sorted((r for r in recs if not r.gated),
                  key=lambda r: (natural_key(r.fr_id), natural_key(r.vr_id)))
    groups: list[tuple[SrRecord, frozenset[str], list[tuple[SrRecord, float]]]] = []
    for r in live:
        toks = frozenset(tokenize(r.text).tokens)
        for rep, rep_toks, members in groups:
            sim = jaccard(toks, rep_toks)
            if sim >= threshold:
                members.append((r, sim))
                break
        else:
            groups.append((r, toks, [(r, 1.0)]))
    return [DuplicateGroup((rep.fr_id, rep.vr_id), tuple((m.fr_id, m.vr_id) for m, _ in members),
                           tuple(s for _, s in members))
            for rep, _, members in groups if len(members) > 1]
