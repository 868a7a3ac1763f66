"""Deterministic offline stand-in for the hosted chat model.

It answers the two shipped prompt templates well enough for dry runs and
determinism checks: synthesis prompts get a numbered list of FR-like
sentences built from the target VR's words, and generation prompts get
either the sentinel (no content word shared between FR and VR) or an SR
sentence stitched from both. The output is a pure function of the prompt.
"""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from collections.abc import Iterable

import numpy as np

from .gateway import CallableChatClient, ChatRequest, UnigramScorer
from .text import tokenize

STOPWORDS = frozenset("""
a an and are as at be by can for from has have if in into is it its of on or such that the
their them then there these this to use used using verify when where which with without not
all any only other should shall must may will than also been being both each more most own
same so some very do does what who how out up over under per via one two three sets set
""".split())

_ACTORS = ("customer", "operator", "administrator", "merchant", "card holder", "clerk")
_FRAMES = (
    "The system shall allow the {actor} to manage {a} and {b} from the main screen.",
    "The {actor} shall be able to submit {a} details together with the {b} record.",
    "The application shall display the {a} history of the {actor}, including {b}.",
    "When the {actor} starts a new transaction, the system shall record the {a} and {b}.",
    "The {actor} shall be able to export a report of {a} filtered by {b}.",
    "The system shall send the {actor} a notification whenever the {a} or {b} changes.",
    "The {actor} shall be able to update the {a} settings used for {b}.",
    "The terminal shall let the {actor} look up {a} using the {b} reference.",
    "The portal shall let the {actor} configure how {a} is linked to {b}.",
    "The system shall keep a list of {a} entries for each {actor} together with {b}.",
)


def _seed(*parts: str) -> int:
    return int.from_bytes(hashlib.sha256("\x1f".join(parts).encode()).digest()[:8], "little")


def content_words(text: str) -> list[str]:
    seen: dict[str, None] = {}
    for t in tokenize(text).tokens:
        if t not in STOPWORDS and len(t) > 2 and not t.isdigit():
            seen.setdefault(t, None)
    return list(seen)


def _last(pattern: str, text: str) -> str | None:
    hits = re.findall(pattern, text, flags=re.MULTILINE)
    return hits[-1].strip() if hits else None


def synthesize(vr_text: str, count: int) -> str:
    desc = vr_text.rsplit(" - ", 1)[-1]
    words = content_words(desc) or content_words(vr_text) or ["data"]
    lines = []
    for i in range(count):
        rng = np.random.Generator(np.random.PCG64(_seed(vr_text, str(i))))
        a, b = (words[int(j)] for j in rng.integers(len(words), size=2))
        frame = _FRAMES[(i + int(rng.integers(len(_FRAMES)))) % len(_FRAMES)]
        actor = _ACTORS[int(rng.integers(len(_ACTORS)))]
        lines.append(f"{i + 1}. " + frame.format(actor=actor, a=a, b=b))
    return "\n".join(lines)


def generate(fr: str, vr: str, sentinel: str) -> str:
    shared = set(content_words(fr)) & set(content_words(vr.rsplit(" - ", 1)[-1]))
    if not shared:
        return sentinel
    desc = vr.rsplit(" - ", 1)[-1].strip().rstrip(".")
    clause = re.sub(r"^(?i:verify)\s+(that\s+)?", "", desc) or desc
    subject = fr.strip().rstrip(".")
    subject = subject[0].lower() + subject[1:] if subject else subject
    return f"To protect the requirement that {subject}, the system shall ensure that {clause}."


def respond(request: ChatRequest) -> str:
    prompt = request.messages[-1].content
    target = _last(r"^Target VR:\s*(.+)$", prompt)
    if target is not None:
        m = re.search(r"exactly (\d+)", prompt)
        return synthesize(target, int(m.group(1)) if m else 10)
    fr, vr = _last(r"^FR:\s*(.+)$", prompt), _last(r"^VR:\s*(.+)$", prompt)
    sentinel = _last(r"answer with the line (\S+)", prompt) or "NOT_APPLICABLE"
    if fr is None or vr is None:
        return prompt.splitlines()[-1]
    return generate(fr, vr, sentinel)


def offline_client() -> CallableChatClient:
    return CallableChatClient(respond, "offline")


def fit_unigram_scorer(texts: Iterable[str], alpha: float = 1.0) -> UnigramScorer:
    """Add-alpha unigram model over lowercased whitespace pieces; unseen pieces share one slot."""
    counts = Counter(w.lower() for t in texts for w in t.split())
    total = sum(counts.values())
    denom = total + alpha * (len(counts) + 1)
    probs = {w: (c + alpha) / denom for w, c in counts.items()}
    scorer = _CaseFoldingScorer(probs, unk_prob=alpha / denom)
    digest = hashlib.sha256(repr(sorted(counts.items())).encode()).hexdigest()[:12]
    scorer.scorer_id = f"offline:unigram/{len(probs)}/{digest}"
    return scorer


class _CaseFoldingScorer(UnigramScorer):
    def _prob(self, word: str) -> float:
        return super()._prob(word.lower())
