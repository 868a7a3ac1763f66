"""JSON-over-HTTP POST with retry and typed error mapping.

Used by the chat client, the remote LM scorer and the remote embedding
provider so that all three classify failures the same way.
"""

from __future__ import annotations

import logging
import threading
import time
from collections.abc import Callable
from dataclasses import dataclass
from typing import Any

import httpx

from .errors import (
    AuthenticationError,
    GatewayError,
    MalformedResponseError,
    RateLimitError,
    TransportError,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RetryPolicy:
    max_retries: int = 4
    base_delay: float = 0.5
    factor: float = 2.0
    max_delay: float = 30.0

    def delay(self, attempt: int) -> float:
        return min(self.base_delay * self.factor ** (attempt - 1), self.max_delay)


class TokenBucket:
    """Thread-safe token bucket; ``rate`` tokens per second, ``burst`` capacity."""

    def __init__(self, rate: float, burst: int = 1, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep) -> None:
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = rate
        self.burst = max(1, burst)
        self._tokens = float(self.burst)
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.burst, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            self._sleep(wait)


def _classify(resp: httpx.Response, attempts: int) -> GatewayError:
    status = resp.status_code
    body = resp.text[:200]
    if status in (401, 403):
        return AuthenticationError(f"HTTP {status}: {body}", status=status, attempts=attempts)
    if status == 429:
        retry_after = resp.headers.get("retry-after")
        try:
            ra = float(retry_after) if retry_after is not None else None
        except ValueError:
            ra = None
        return RateLimitError(f"HTTP 429: {body}", status=status, attempts=attempts, retry_after=ra)
    if status >= 500 or status == 408:
        return TransportError(f"HTTP {status}: {body}", status=status, attempts=attempts)
    return GatewayError(f"HTTP {status}: {body}", status=status, attempts=attempts)


def post_json(
    client: httpx.Client,
    url: str,
    payload: dict[str, Any],
    *,
    headers: dict[str, str] | None = None,
    policy: RetryPolicy = RetryPolicy(),
    sleep: Callable[[float], None] = time.sleep,
) -> dict[str, Any]:
    """POST ``payload`` and return the decoded JSON object.

    Retryable failures (network errors, timeouts, 5xx, 429) are retried
    with exponential backoff up to ``policy.max_retries`` extra attempts;
    the final failure is raised with ``attempts`` set. Requests are
    assumed idempotent.
    """
    attempt = 0
    while True:
        attempt += 1
        try:
            resp = client.post(url, json=payload, headers=headers)
        except httpx.TimeoutException as exc:
            err: GatewayError = TransportError(f"timeout: {exc}", attempts=attempt)
        except httpx.TransportError as exc:
            err = TransportError(f"transport failure: {exc}", attempts=attempt)
        else:
            if resp.status_code == 200:
                try:
                    data = resp.json()
                except ValueError as exc:
                    raise MalformedResponseError(f"response is not JSON: {exc}",
                                                 status=200, attempts=attempt) from exc
                if not isinstance(data, dict):
                    raise MalformedResponseError("response JSON is not an object",
                                                 status=200, attempts=attempt)
                return data
            err = _classify(resp, attempt)
        if not err.retryable or attempt > policy.max_retries:
            raise err
        delay = policy.delay(attempt)
        if err.retry_after is not None:
            delay = max(delay, err.retry_after)
        logger.warning("retrying %s after %s (attempt %d, sleeping %.2fs)", url, err, attempt, delay)
        sleep(delay)
