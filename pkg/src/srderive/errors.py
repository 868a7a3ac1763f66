"""Exception hierarchy shared across the package."""

from __future__ import annotations


class SrDeriveError(Exception):
    """Base class for every error raised by this package."""


class ParseError(SrDeriveError):
    """Input document could not be parsed; ``path`` names the offending location."""

    def __init__(self, message: str, path: str = "") -> None:
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class ValidationError(SrDeriveError):
    """Input parsed but violates a domain invariant."""


class InvalidInputError(SrDeriveError):
    """An operation was called with arguments outside its precondition."""


class ConfigError(SrDeriveError):
    """Configuration is missing, inconsistent, or references unknown entities."""


class TemplateError(SrDeriveError):
    """A prompt template asset is missing a required slot."""

    def __init__(self, message: str, slot: str = "") -> None:
        super().__init__(message)
        self.slot = slot


class DegenerateInputError(SrDeriveError):
    """Statistic or weighting is undefined for the given data."""


class EmptyDocumentError(SrDeriveError):
    """A document with zero tokens was scored."""


class QueryError(SrDeriveError):
    """A retrieval query could not be executed (e.g. empty tokenization)."""


class IndexLoadError(SrDeriveError):
    """A persisted index is corrupt, truncated, or incompatible."""

    def __init__(self, message: str, file: str = "") -> None:
        super().__init__(f"{file}: {message}" if file else message)
        self.file = file


class IndexBuildError(SrDeriveError):
    """Index construction stopped part way; ``completed`` of ``total`` VRs were embedded."""

    def __init__(self, message: str, completed: int, total: int) -> None:
        super().__init__(f"{message} ({completed}/{total} VRs embedded)")
        self.completed = completed
        self.total = total


class SynthesisParseError(SrDeriveError):
    """A synthesis response had no recognisable list structure."""

    def __init__(self, message: str, raw: str) -> None:
        super().__init__(message)
        self.raw = raw


class GenerationError(SrDeriveError):
    """The model returned nothing usable for an SR request (distinct from gating)."""


class GatewayError(SrDeriveError):
    """Failure talking to a model service.

    ``retryable`` tells callers whether repeating the same request can help.
    """

    retryable = False

    def __init__(self, message: str, *, status: int | None = None, attempts: int = 1,
                 retry_after: float | None = None) -> None:
        super().__init__(message)
        self.status = status
        self.attempts = attempts
        self.retry_after = retry_after


class TransportError(GatewayError):
    """Network failure, timeout, or 5xx response."""

    retryable = True


class RateLimitError(GatewayError):
    """HTTP 429; still raised once the retry budget is spent."""

    retryable = True


class AuthenticationError(GatewayError):
    """Credential rejected (401/403)."""


class MalformedResponseError(GatewayError):
    """Response body does not have the expected shape."""


class ScriptedMissError(GatewayError):
    """A scripted mock received a request it has no canned answer for."""

    def __init__(self, fingerprint: str) -> None:
        super().__init__(f"no scripted response for fingerprint {fingerprint}")
        self.fingerprint = fingerprint
