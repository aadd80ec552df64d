"""Exception hierarchy shared across the package."""

from __future__ import annotations


class AggQueryError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(AggQueryError):
    """Invalid input: bad parameters, duplicate ids, contract violations."""


class NotFoundError(AggQueryError):
    """A referenced id (chunk, document, snapshot, session) does not exist."""


class ConfigError(AggQueryError):
    """Missing or malformed configuration (templates, backend settings)."""


class PhaseError(AggQueryError):
    """An operation was attempted in the wrong session phase."""


class BackendError(AggQueryError):
    """Base class for model-backend failures."""


class UnscriptedPromptError(BackendError):
    """The scripted backend received a request no script was registered for."""


class BudgetExceededError(BackendError):
    """A configured call or token ceiling would be breached."""


class TransportError(BackendError):
    """Remote call failed after exhausting retries; carries the cause."""

    def __init__(self, message: str, cause: BaseException | None = None):
        super().__init__(message)
        self.cause = cause


class ResponseFormatError(BackendError):
    """Backend output could not be parsed; carries the raw response text."""

    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw
