"""ASVS and functional-requirement corpora."""

from __future__ import annotations

import hashlib
import json
import logging
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable

from .errors import InvalidInputError, ParseError, ValidationError
from .text import tokenize

logger = logging.getLogger(__name__)

DEFAULT_SEPARATOR = " - "
VR_TOKEN_BAND = (4, 160)
FR_TOKEN_BAND = (1, 512)

_VR_ID = re.compile(r"^\d+\.\d+\.\d+$")
_SHORTCODE = re.compile(r"^[Vv]?(\d+(?:\.\d+)*)$")


def vr_sort_key(vr_id: str) -> tuple[int, ...]:
    """Natural order for dotted ids, so 1.2.10 sorts after 1.2.9."""
    return tuple(int(p) for p in vr_id.split("."))


def _strip_shortcode(code: Any, path: str) -> str:
    m = _SHORTCODE.match(str(code).strip())
    if not m:
        raise ParseError(f"unrecognised shortcode {code!r}", path)
    return m.group(1)


@dataclass(frozen=True)
class VrRecord:
    id: str
    chapter_ordinal: int
    chapter_title: str
    section_title: str
    description: str
    deprecated: bool = False
    composed_text: str = ""

    def __post_init__(self) -> None:
        if not _VR_ID.match(self.id):
            raise ValidationError(f"VR id {self.id!r} is not of the form N.N.N")
        if not 1 <= self.chapter_ordinal <= 14:
            raise ValidationError(f"VR {self.id}: chapter ordinal {self.chapter_ordinal} out of range")
        if bool(self.composed_text) == self.deprecated:
            raise ValidationError(f"VR {self.id}: composed text must be present iff not deprecated")

    @property
    def section_id(self) -> str:
        return self.id.rsplit(".", 1)[0]


def is_deprecated(description: str) -> bool:
    text = description.strip()
    return not text or "[DELETED" in text.upper()


def compose_vr_text(record: VrRecord, separator: str = DEFAULT_SEPARATOR) -> str:
    """Join chapter, section and description, dropping empty parts.

    Skipping an empty part is what collapses the doubled separator it
    would otherwise leave behind.
    """
    if record.deprecated:
        raise InvalidInputError(f"VR {record.id} is deprecated and has no retrieval text")
    return _join((record.chapter_title, record.section_title, record.description), separator)


def _join(parts: Iterable[str], separator: str) -> str:
    return separator.join(p.strip() for p in parts if p.strip())


def make_vr(id: str, chapter_ordinal: int, chapter_title: str, section_title: str,
            description: str, separator: str = DEFAULT_SEPARATOR) -> VrRecord:
    if is_deprecated(description):
        return VrRecord(id, chapter_ordinal, chapter_title, section_title, description, True)
    composed = _join((chapter_title, section_title, description), separator)
    n = len(tokenize(composed))
    lo, hi = VR_TOKEN_BAND
    if not lo <= n <= hi:
        logger.warning("VR %s composed text has %d tokens, outside [%d, %d]", id, n, lo, hi)
    return VrRecord(id, chapter_ordinal, chapter_title, section_title, description, False, composed)


@dataclass(frozen=True)
class VrCorpus:
    records: tuple[VrRecord, ...]
    exclusion_log: tuple[tuple[str, str], ...] = ()
    source_version: str = ""

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for r in self.records:
            if r.id in seen:
                raise ValidationError(f"duplicate VR id {r.id}")
            if r.deprecated:
                raise ValidationError(f"deprecated VR {r.id} cannot be a corpus record")
            seen.add(r.id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def get(self, vr_id: str) -> VrRecord:
        for r in self.records:
            if r.id == vr_id:
                return r
        raise KeyError(vr_id)

    def chapter_counts(self) -> dict[int, int]:
        counts = Counter(r.chapter_ordinal for r in self.records)
        return {ch: counts[ch] for ch in sorted(counts)}

    def deprecated_ids(self) -> list[str]:
        return [i for i, reason in self.exclusion_log if reason == "deprecated"]

    def to_dict(self) -> dict[str, Any]:
        return {
            "source_version": self.source_version,
            "records": [asdict(r) for r in self.records],
            "exclusion_log": [list(e) for e in self.exclusion_log],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> VrCorpus:
        try:
            records = tuple(VrRecord(**r) for r in data["records"])
            log = tuple((str(i), str(reason)) for i, reason in data.get("exclusion_log", []))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad serialized corpus: {exc}") from exc
        return cls(records, log, str(data.get("source_version", "")))

    def content_hash(self) -> str:
        """sha256 over the ids and composed texts, in record order."""
        h = hashlib.sha256()
        for r in self.records:
            h.update(r.id.encode())
            h.update(b"\x1f")
            h.update(r.composed_text.encode())
            h.update(b"\x1e")
        return h.hexdigest()


def _require(obj: Any, key: str, path: str) -> Any:
    if not isinstance(obj, dict):
        raise ParseError("expected an object", path)
    if key not in obj:
        raise ParseError(f"missing field {key!r}", path)
    return obj[key]


def _ingest_nested(document: dict[str, Any], separator: str) -> list[VrRecord]:
    chapters = _require(document, "Requirements", "$")
    if not isinstance(chapters, list):
        raise ParseError("expected a list", "$.Requirements")
    out = []
    for ci, chapter in enumerate(chapters):
        cpath = f"$.Requirements[{ci}]"
        ch_ord = int(_strip_shortcode(_require(chapter, "Shortcode", cpath), cpath))
        ch_name = str(_require(chapter, "Name", cpath))
        sections = _require(chapter, "Items", cpath)
        if not isinstance(sections, list):
            raise ParseError("expected a list", f"{cpath}.Items")
        for si, section in enumerate(sections):
            spath = f"{cpath}.Items[{si}]"
            sec_name = str(_require(section, "Name", spath))
            items = _require(section, "Items", spath)
            if not isinstance(items, list):
                raise ParseError("expected a list", f"{spath}.Items")
            for ii, item in enumerate(items):
                ipath = f"{spath}.Items[{ii}]"
                vid = _strip_shortcode(_require(item, "Shortcode", ipath), ipath)
                desc = _require(item, "Description", ipath)
                if not isinstance(desc, str):
                    raise ParseError("Description must be a string", ipath)
                if not _VR_ID.match(vid):
                    raise ParseError(f"item shortcode {vid!r} is not N.N.N", ipath)
                out.append(make_vr(vid, ch_ord, ch_name, sec_name, desc, separator))
    return out


def _ingest_flat(rows: list[Any], base: str, separator: str) -> list[VrRecord]:
    out = []
    for i, row in enumerate(rows):
        path = f"{base}[{i}]"
        vid = _strip_shortcode(_require(row, "req_id", path), path)
        ch = _strip_shortcode(_require(row, "chapter_id", path), path)
        desc = _require(row, "req_description", path)
        if not isinstance(desc, str):
            raise ParseError("req_description must be a string", path)
        if not _VR_ID.match(vid):
            raise ParseError(f"req_id {vid!r} is not N.N.N", path)
        out.append(make_vr(vid, int(ch), str(_require(row, "chapter_name", path)),
                           str(_require(row, "section_name", path)), desc, separator))
    return out


def ingest_asvs(document: dict[str, Any] | list[Any],
                separator: str = DEFAULT_SEPARATOR) -> VrCorpus:
    """Build a corpus from an ASVS 4.x JSON export.

    Accepts the nested export (``Requirements`` -> chapter ``Items`` ->
    section ``Items``) and the flat one (rows with ``req_id``,
    ``chapter_id``, ``chapter_name``, ``section_name``, ``req_description``,
    either as a bare list or under ``requirements``).
    """
    if isinstance(document, list):
        vrs = _ingest_flat(document, "$", separator)
        version = ""
    elif isinstance(document, dict) and "Requirements" in document:
        vrs = _ingest_nested(document, separator)
        version = str(document.get("Version", ""))
    elif isinstance(document, dict) and isinstance(document.get("requirements"), list):
        vrs = _ingest_flat(document["requirements"], "$.requirements", separator)
        version = str(document.get("version", ""))
    else:
        raise ParseError("not an ASVS export: expected 'Requirements' or 'requirements'", "$")

    seen: set[str] = set()
    records, log = [], []
    for vr in vrs:
        if vr.id in seen:
            raise ValidationError(f"duplicate VR id {vr.id}")
        seen.add(vr.id)
        if vr.deprecated:
            log.append((vr.id, "deprecated"))
        else:
            records.append(vr)
    return VrCorpus(tuple(records), tuple(log), version)


def load_asvs(path: str | Path | None = None, separator: str = DEFAULT_SEPARATOR) -> VrCorpus:
    """Ingest an export file, or the bundled 4.0.3 data when ``path`` is None."""
    try:
        if path is None:
            raw = resources.files("srderive.data").joinpath("asvs-4.0.3.json").read_text("utf-8")
        else:
            raw = Path(path).read_text("utf-8")
        document = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON at line {exc.lineno}: {exc.msg}", str(path or "bundled")) from exc
    return ingest_asvs(document, separator)


def _prefix_matches(vr_id: str, prefix: str) -> bool:
    return vr_id == prefix or vr_id.startswith(prefix + ".")


def apply_exclusions(corpus: VrCorpus, excluded_sections: Iterable[str]) -> VrCorpus:
    prefixes = [p.strip().lstrip("Vv") for p in excluded_sections]
    for p in prefixes:
        if not re.fullmatch(r"\d+(\.\d+)*", p):
            raise InvalidInputError(f"exclusion prefix {p!r} is not a dotted ordinal")
    kept, removed = [], []
    hits = Counter()
    for r in corpus.records:
        match = next((p for p in prefixes if _prefix_matches(r.id, p)), None)
        if match is None:
            kept.append(r)
        else:
            hits[match] += 1
            removed.append((r.id, "process-oriented"))
    for p in prefixes:
        if not hits[p]:
            logger.warning("exclusion prefix %s matched no VR", p)
    logger.info("excluded %d VRs, %d remain", len(removed), len(kept))
    return VrCorpus(tuple(kept), corpus.exclusion_log + tuple(removed), corpus.source_version)


def default_exclusions() -> list[str]:
    raw = resources.files("srderive.data").joinpath("exclusions.json").read_text("utf-8")
    return load_exclusion_config(json.loads(raw))


def load_exclusion_config(data: dict[str, Any] | list[Any]) -> list[str]:
    if isinstance(data, list):
        return [str(p) for p in data]
    try:
        return [str(s["prefix"]) for s in data["sections"]]
    except (KeyError, TypeError) as exc:
        raise ParseError(f"exclusion config: {exc}") from exc


def in_scope_corpus(path: str | Path | None = None,
                    exclusions: list[str] | None = None) -> VrCorpus:
    corpus = load_asvs(path)
    return apply_exclusions(corpus, default_exclusions() if exclusions is None else exclusions)


@dataclass(frozen=True)
class FrRecord:
    project: str
    id: str
    text: str

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValidationError(f"FR {self.id} has empty text")


@dataclass(frozen=True)
class FrSet:
    project: str
    records: tuple[FrRecord, ...]
    rejections: tuple[tuple[int, str], ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        if not self.records:
            raise ValidationError(f"FR set for {self.project} is empty")
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            dup = next(i for i, c in Counter(ids).items() if c > 1)
            raise ValidationError(f"duplicate FR id {dup} in {self.project}")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def get(self, fr_id: str) -> FrRecord:
        for r in self.records:
            if r.id == fr_id:
                return r
        raise KeyError(fr_id)


def parse_frs(lines: Iterable[str], project: str, source: str = "<input>") -> FrSet:
    """One FR per JSON line; blank lines are skipped, bad records are reported."""
    records, rejections = [], []
    lo, hi = FR_TOKEN_BAND
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"line {lineno}: {exc.msg}", source) from exc
        if not isinstance(obj, dict):
            raise ParseError(f"line {lineno}: expected an object", source)
        text = obj.get("text")
        if not isinstance(text, str) or not text.strip():
            rejections.append((lineno, "blank text"))
            continue
        n = len(tokenize(text))
        if not lo <= n <= hi:
            rejections.append((lineno, f"token count {n} outside [{lo}, {hi}]"))
            continue
        fr_id = obj.get("id")
        fr_id = f"{project}-{lineno}" if fr_id in (None, "") else str(fr_id)
        records.append(FrRecord(project, fr_id, text.strip()))
    for lineno, reason in rejections:
        logger.warning("%s line %d rejected: %s", source, lineno, reason)
    return FrSet(project, tuple(records), tuple(rejections))


def ingest_frs(file: str | Path, project: str | None = None) -> FrSet:
    path = Path(file)
    if project is None:
        project = path.stem
    with path.open(encoding="utf-8") as fh:
        return parse_frs(fh, project, str(path))


def write_frs(frs: FrSet, file: str | Path) -> None:
    with Path(file).open("w", encoding="utf-8") as fh:
        for r in frs.records:
            fh.write(json.dumps({"id": r.id, "text": r.text}, ensure_ascii=False) + "\n")
