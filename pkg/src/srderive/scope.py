"""Keyword filter for requirements that belong to another project."""

from __future__ import annotations

import json
import re
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .errors import ConfigError, ParseError
from .text import tokenize


@dataclass(frozen=True)
class ProjectKeywordSet:
    project: str
    keywords: tuple[str, ...]

    def __post_init__(self) -> None:
        kws = tuple(k.strip().lower() for k in self.keywords)
        if not kws or any(not k for k in kws):
            raise ConfigError(f"project {self.project}: keywords must be non-empty")
        if len(set(kws)) != len(kws):
            raise ConfigError(f"project {self.project}: duplicate keywords")
        for k in kws:
            if tokenize(k).tokens != (k,):
                raise ConfigError(f"project {self.project}: keyword {k!r} is not a single token")
        object.__setattr__(self, "keywords", kws)


def load_keyword_config(source: str | Path | Mapping[str, Sequence[str]] | None = None
                        ) -> dict[str, ProjectKeywordSet]:
    """Read ``{project: [keywords]}``; ``None`` loads the shipped default."""
    if source is None:
        data = json.loads(resources.files("srderive.data").joinpath("keywords.json").read_text("utf-8"))
    elif isinstance(source, Mapping):
        data = source
    else:
        try:
            data = json.loads(Path(source).read_text("utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ParseError(str(exc), str(source)) from exc
    if not isinstance(data, Mapping):
        raise ParseError("keyword config must be an object", str(source))
    return {p: ProjectKeywordSet(p, tuple(kws)) for p, kws in data.items()}


@dataclass(frozen=True)
class ScopeDecision:
    text: str
    in_scope: bool
    matched_keyword: str | None = None
    matched_foreign_project: str | None = None


def _resolve(target: str, keyword_sets: Mapping[str, ProjectKeywordSet]) -> str:
    if target in keyword_sets:
        return target
    folded = {p.lower(): p for p in keyword_sets}
    if target.lower() in folded:
        return folded[target.lower()]
    raise ConfigError(f"no keyword set for project {target!r}; known: {sorted(keyword_sets)}")


def decide(text: str, target: str, keyword_sets: Mapping[str, ProjectKeywordSet]) -> ScopeDecision:
    target = _resolve(target, keyword_sets)
    own = set(keyword_sets[target].keywords)
    tokens = tokenize(text).tokens
    present = set(tokens)
    for project in sorted(keyword_sets):
        if project == target:
            continue
        for kw in keyword_sets[project].keywords:
            if kw in present and kw not in own:
                return ScopeDecision(text, False, kw, project)
    return ScopeDecision(text, True)


def filter_out_of_scope(srs: Sequence[str], target: str,
                        keyword_sets: Mapping[str, ProjectKeywordSet] | None = None
                        ) -> list[ScopeDecision]:
    """An SR is out of scope iff a whole-token keyword of another project occurs in it."""
    keyword_sets = load_keyword_config() if keyword_sets is None else keyword_sets
    target = _resolve(target, keyword_sets)
    if len(keyword_sets) < 2:
        raise ConfigError("scope filtering needs at least one other project")
    return [decide(t, target, keyword_sets) for t in srs]


_WORD = re.compile(r"[^\W_]+")
_SENTENCE_END = re.compile(r"[.!?:;]\s*$")


def proper_noun_review_flags(srs: Sequence[str], known_vocabulary: set[str] | frozenset[str]
                             ) -> list[list[str]]:
    """Capitalised words not at a sentence start and unknown to the vocabulary.

    Advisory only: the list goes to a human reviewer and never changes
    a scope decision.
    """
    known = {w.lower() for w in known_vocabulary}
    out = []
    for text in srs:
        flags: list[str] = []
        for m in _WORD.finditer(text):
            word = m.group(0)
            if not word[0].isupper():
                continue
            before = text[:m.start()]
            if not before.strip() or _SENTENCE_END.search(before):
                continue
            if word.lower() not in known and word not in flags:
                flags.append(word)
        out.append(flags)
    return out
