"""Chat-completion and token-logprob clients, with deterministic mocks.

HTTP wire shapes (all JSON over POST):

chat     ``{base}/chat/completions``
         request  ``{"model", "messages": [{"role", "content"}], "temperature",
                  "seed"?, "max_tokens"?}``
         response ``{"choices": [{"message": {"content"}, "finish_reason"}],
                  "usage"?: {...}}``
scoring  ``{base}/completions``
         request  ``{"model", "prompt", "max_tokens": 0, "echo": true,
                  "logprobs": 0}``
         response ``{"choices": [{"logprobs": {"tokens": [...],
                  "token_logprobs": [...]}}]}``
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import threading
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol, runtime_checkable

import httpx

from ._http import RetryPolicy, TokenBucket, post_json
from .errors import (
    ConfigError,
    InvalidInputError,
    MalformedResponseError,
    ParseError,
    ScriptedMissError,
    SrDeriveError,
)

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class Message:
    role: str
    content: str


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    messages: tuple[Message, ...]
    temperature: float = 0.0
    seed: int | None = None
    max_tokens: int | None = None
    # caller bookkeeping; never sent on the wire
    tag: str | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        msgs = tuple(m if isinstance(m, Message) else Message(*m) for m in self.messages)
        object.__setattr__(self, "messages", msgs)
        if not any(m.role == "user" for m in msgs):
            raise InvalidInputError("chat request needs at least one user message")
        for m in msgs:
            if m.role not in ROLES:
                raise InvalidInputError(f"unknown role {m.role!r}")
            if not m.content:
                raise InvalidInputError(f"empty {m.role} message")
        if not self.temperature >= 0:
            raise InvalidInputError("temperature must be >= 0")

    def payload(self) -> dict[str, Any]:
        body: dict[str, Any] = {
            "model": self.model_id,
            "messages": [{"role": m.role, "content": m.content} for m in self.messages],
            "temperature": self.temperature,
        }
        if self.seed is not None:
            body["seed"] = self.seed
        if self.max_tokens is not None:
            body["max_tokens"] = self.max_tokens
        return body


@dataclass(frozen=True)
class ChatResponse:
    content: str
    finish_reason: str = "stop"
    usage: Mapping[str, int] = field(default_factory=dict)


def fingerprint(messages: Iterable[Message] | ChatRequest) -> str:
    """sha256 of the canonical JSON of (role, content) pairs."""
    if isinstance(messages, ChatRequest):
        messages = messages.messages
    canon = json.dumps([[m.role, m.content] for m in messages], ensure_ascii=False,
                       separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


@runtime_checkable
class ChatClient(Protocol):
    client_id: str
    max_in_flight: int

    def chat(self, request: ChatRequest) -> ChatResponse: ...


class HttpChatClient:
    def __init__(self, base_url: str, *, api_key: str | None = None, timeout: float = 60.0,
                 policy: RetryPolicy = RetryPolicy(), rate_per_sec: float | None = None,
                 max_in_flight: int = 4, client: httpx.Client | None = None,
                 sleep: Callable[[float], None] | None = None) -> None:
        if max_in_flight < 1:
            raise ConfigError("max_in_flight must be >= 1")
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.client_id = f"http:{base_url}"
        self.max_in_flight = max_in_flight
        self._headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._policy = policy
        self._bucket = TokenBucket(rate_per_sec, burst=max_in_flight) if rate_per_sec else None
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._client = client or httpx.Client(timeout=timeout)
        self._sleep = sleep

    def chat(self, request: ChatRequest) -> ChatResponse:
        with self._slots:
            if self._bucket:
                self._bucket.acquire()
            kw = {"sleep": self._sleep} if self._sleep else {}
            data = post_json(self._client, self.url, request.payload(), headers=self._headers,
                             policy=self._policy, **kw)
        return parse_chat_response(data)


def parse_chat_response(data: Mapping[str, Any]) -> ChatResponse:
    try:
        choice = data["choices"][0]
        content = choice["message"].get("content")
        finish = str(choice.get("finish_reason") or "stop")
    except (KeyError, IndexError, TypeError, AttributeError) as exc:
        raise MalformedResponseError(f"no choices[0].message in response: {exc}") from exc
    if content is None and finish == "stop":
        raise MalformedResponseError("finish_reason is stop but content is missing")
    if content is not None and not isinstance(content, str):
        raise MalformedResponseError("message content is not a string")
    usage = data.get("usage") or {}
    return ChatResponse(content or "", finish,
                        {k: int(v) for k, v in usage.items() if isinstance(v, (int, float))})


class EchoChatClient:
    """Answers with the last user message."""

    client_id = "mock:echo"
    max_in_flight = 1

    def chat(self, request: ChatRequest) -> ChatResponse:
        last = [m for m in request.messages if m.role == "user"][-1]
        return ChatResponse(last.content)


class ScriptedChatClient:
    """Canned responses keyed by message fingerprint; misses are errors."""

    max_in_flight = 1

    def __init__(self, script: Mapping[str, str] | None = None, name: str = "scripted") -> None:
        self.script: dict[str, str] = dict(script or {})
        self.client_id = f"mock:{name}"
        self.calls: list[str] = []

    def add(self, messages: Sequence[Message] | ChatRequest, response: str) -> str:
        fp = fingerprint(messages)
        self.script[fp] = response
        return fp

    def chat(self, request: ChatRequest) -> ChatResponse:
        fp = fingerprint(request)
        self.calls.append(fp)
        if fp not in self.script:
            raise ScriptedMissError(fp)
        return ChatResponse(self.script[fp])

    @classmethod
    def from_file(cls, path: str | Path) -> ScriptedChatClient:
        try:
            data = json.loads(Path(path).read_text("utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ParseError(str(exc), str(path)) from exc
        if not isinstance(data, dict) or not all(isinstance(v, str) for v in data.values()):
            raise ParseError("mock script must map fingerprints to strings", str(path))
        return cls(data, Path(path).stem)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.script, indent=1, sort_keys=True), "utf-8")


class CallableChatClient:
    """Deterministic offline responder: ``fn(request) -> text``."""

    max_in_flight = 1

    def __init__(self, fn: Callable[[ChatRequest], str], name: str = "callable") -> None:
        self._fn = fn
        self.client_id = f"mock:{name}"

    def chat(self, request: ChatRequest) -> ChatResponse:
        return ChatResponse(self._fn(request))


def run_bounded(client: ChatClient, requests: Sequence[ChatRequest], *,
                deterministic: bool = True) -> list[ChatResponse | SrDeriveError]:
    """Send requests with at most ``client.max_in_flight`` in flight.

    Results come back in input order; a failed request yields its exception
    in place of a response so one failure does not sink the batch.
    """

    def one(req: ChatRequest) -> ChatResponse | SrDeriveError:
        try:
            return client.chat(req)
        except SrDeriveError as exc:
            logger.warning("request %s failed: %s", req.tag or fingerprint(req)[:12], exc)
            return exc

    workers = 1 if deterministic else max(1, int(getattr(client, "max_in_flight", 1)))
    if workers == 1:
        return [one(r) for r in requests]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, requests))


# ---------------------------------------------------------------- LM scoring


@runtime_checkable
class LmScorer(Protocol):
    scorer_id: str

    def score_tokens(self, text: str) -> list[tuple[str, float]]: ...


_PIECE = re.compile(r"\s*\S+\s*$|\s*\S+", re.DOTALL)


class UnigramScorer:
    """Context-free scorer over whitespace-delimited pieces.

    Each piece carries its leading whitespace (the last one also its
    trailing whitespace) so pieces concatenate back to the input. With
    ``probs=None`` every piece has probability 1 / ``vocab_size``.
    """

    def __init__(self, probs: Mapping[str, float] | None = None, *, vocab_size: int | None = None,
                 unk_prob: float | None = None) -> None:
        if probs is None and not vocab_size:
            raise InvalidInputError("give probs or vocab_size")
        if probs is not None:
            if any(not 0 < p <= 1 for p in probs.values()):
                raise InvalidInputError("unigram probabilities must lie in (0, 1]")
        self.probs = dict(probs) if probs is not None else None
        self.vocab_size = vocab_size
        self.unk_prob = unk_prob
        self.scorer_id = (f"mock:unigram-uniform/{vocab_size}" if probs is None
                          else f"mock:unigram/{len(self.probs)}")

    def _prob(self, word: str) -> float:
        if self.probs is None:
            return 1.0 / self.vocab_size
        if word in self.probs:
            return self.probs[word]
        if self.unk_prob is None:
            raise InvalidInputError(f"token {word!r} not in unigram vocabulary")
        return self.unk_prob

    def score_tokens(self, text: str) -> list[tuple[str, float]]:
        return [(p, math.log(self._prob(p.strip()))) for p in _PIECE.findall(text)]


class RemoteLmScorer:
    """Echo-mode completion endpoint returning per-token logprobs.

    A start-of-text ``prefix`` is prepended so the first real token also gets
    a probability; prefix tokens are dropped from the result.
    """

    def __init__(self, base_url: str, model: str, *, api_key: str | None = None,
                 prefix: str = "<|endoftext|>", timeout: float = 60.0,
                 policy: RetryPolicy = RetryPolicy(), client: httpx.Client | None = None) -> None:
        self.url = base_url.rstrip("/") + "/completions"
        self.model = model
        self.prefix = prefix
        self.scorer_id = f"remote:{model}"
        self._headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._policy = policy
        self._client = client or httpx.Client(timeout=timeout)

    def score_tokens(self, text: str) -> list[tuple[str, float]]:
        payload = {"model": self.model, "prompt": self.prefix + text, "max_tokens": 0,
                   "echo": True, "logprobs": 0}
        data = post_json(self._client, self.url, payload, headers=self._headers, policy=self._policy)
        try:
            lp = data["choices"][0]["logprobs"]
            tokens, values = list(lp["tokens"]), list(lp["token_logprobs"])
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponseError(f"no logprobs in response: {exc}") from exc
        if len(tokens) != len(values):
            raise MalformedResponseError("tokens and token_logprobs differ in length")
        consumed, start = 0, 0
        while consumed < len(self.prefix) and start < len(tokens):
            consumed += len(tokens[start])
            start += 1
        if consumed != len(self.prefix):
            raise MalformedResponseError("prefix does not align with token boundaries")
        out = []
        for tok, v in zip(tokens[start:], values[start:]):
            if not isinstance(v, (int, float)):
                raise MalformedResponseError(f"missing logprob for token {tok!r}")
            out.append((str(tok), float(v)))
        return out


def token_logprobs(scorer: LmScorer, text: str) -> list[tuple[str, float]]:
    if not text or not text.strip():
        raise InvalidInputError("cannot score empty text")
    pairs = scorer.score_tokens(text)
    if "".join(t for t, _ in pairs) != text:
        raise MalformedResponseError(f"{scorer.scorer_id}: tokens do not reconstruct the text")
    for tok, lp in pairs:
        if not lp <= 1e-9 or math.isnan(lp):
            raise MalformedResponseError(f"{scorer.scorer_id}: logprob {lp} > 0 for {tok!r}")
    return [(t, min(lp, 0.0)) for t, lp in pairs]


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class GatewayConfig:
    chat_url: str | None = None
    scorer_url: str | None = None
    api_key: str | None = None
    chat_model: str = "gpt-4"
    scorer_model: str = "davinci-002"
    max_in_flight: int = 4
    rate_per_sec: float | None = None
    max_retries: int = 4

    @classmethod
    def from_env(cls, env: Mapping[str, str] | None = None) -> GatewayConfig:
        env = os.environ if env is None else env
        return cls(
            chat_url=env.get("SRDERIVE_CHAT_URL") or None,
            scorer_url=env.get("SRDERIVE_SCORER_URL") or env.get("SRDERIVE_CHAT_URL") or None,
            api_key=env.get("SRDERIVE_API_KEY") or None,
            chat_model=env.get("SRDERIVE_CHAT_MODEL", cls.chat_model),
            scorer_model=env.get("SRDERIVE_SCORER_MODEL", cls.scorer_model),
        )

    def chat_client(self) -> HttpChatClient:
        if not self.chat_url:
            raise ConfigError("no chat endpoint configured (set SRDERIVE_CHAT_URL)")
        return HttpChatClient(self.chat_url, api_key=self.api_key,
                              policy=RetryPolicy(max_retries=self.max_retries),
                              rate_per_sec=self.rate_per_sec, max_in_flight=self.max_in_flight)

    def scorer(self) -> RemoteLmScorer:
        if not self.scorer_url:
            raise ConfigError("no scoring endpoint configured (set SRDERIVE_SCORER_URL)")
        return RemoteLmScorer(self.scorer_url, self.scorer_model, api_key=self.api_key,
                              policy=RetryPolicy(max_retries=self.max_retries))
