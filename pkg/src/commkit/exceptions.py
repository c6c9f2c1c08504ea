"""Exception hierarchy and the error record carried by failed futures."""
from __future__ import annotations

import enum
from dataclasses import dataclass

__all__ = (
    "ErrorCategory",
    "ErrorInfo",
    "CommkitError",
    "EncodingError",
    "DecodeError",
    "AlreadyResolved",
    "ClosedError",
    "UriError",
    "BrokerConnectionError",
    "UnknownSubscriber",
    "DuplicateIdentifier",
    "UnknownDelivery",
    "UnknownConsumer",
    "NotConfirmed",
    "ScenarioError",
    "TraceMismatch",
    "MessageFailed",
    "UnroutableError",
    "RemoteException",
    "DeliveryTimeout",
    "ConnectionLost",
    "error_from_info",
)


class ErrorCategory(str, enum.Enum):
    UNROUTABLE = "UNROUTABLE"
    TIMEOUT = "TIMEOUT"
    REMOTE_EXCEPTION = "REMOTE_EXCEPTION"
    CONNECTION_LOST = "CONNECTION_LOST"
    CANCELLED = "CANCELLED"

    @property
    def retry_safe(self) -> bool:
        return self in (ErrorCategory.UNROUTABLE, ErrorCategory.TIMEOUT)


@dataclass(frozen=True)
class ErrorInfo:
    category: ErrorCategory
    message: str = ""

    def to_dict(self) -> dict:
        return {"category": self.category.value, "message": self.message}

    @classmethod
    def from_dict(cls, data: dict) -> "ErrorInfo":
        return cls(ErrorCategory(data["category"]), str(data.get("message", "")))


class CommkitError(Exception):
    """Base class for all errors raised by this package."""


class EncodingError(CommkitError, ValueError):
    pass


class DecodeError(CommkitError, ValueError):
    pass


class AlreadyResolved(CommkitError, RuntimeError):
    pass


class ClosedError(CommkitError, RuntimeError):
    pass


class UriError(CommkitError, ValueError):
    pass


class BrokerConnectionError(CommkitError, ConnectionError):
    """The broker could not be reached or refused the credentials."""


class UnknownSubscriber(CommkitError, KeyError):
    pass


class DuplicateIdentifier(CommkitError, ValueError):
    pass


class UnknownDelivery(CommkitError, KeyError):
    pass


class UnknownConsumer(CommkitError, KeyError):
    pass


class NotConfirmed(CommkitError):
    pass


class ScenarioError(CommkitError, ValueError):
    pass


class TraceMismatch(CommkitError):
    def __init__(self, index: int, expected, actual):
        super().__init__(f"trace diverges at record {index}: expected {expected!r}, got {actual!r}")
        self.index = index
        self.expected = expected
        self.actual = actual


class MessageFailed(CommkitError):
    """Raised when awaiting a future that failed; ``info`` holds the category."""

    category = None

    def __init__(self, info: ErrorInfo | str = ""):
        if not isinstance(info, ErrorInfo):
            info = ErrorInfo(self.category or ErrorCategory.REMOTE_EXCEPTION, str(info))
        super().__init__(f"{info.category.value}: {info.message}" if info.message else info.category.value)
        self.info = info


class UnroutableError(MessageFailed):
    category = ErrorCategory.UNROUTABLE


class RemoteException(MessageFailed):
    category = ErrorCategory.REMOTE_EXCEPTION


class DeliveryTimeout(MessageFailed):
    category = ErrorCategory.TIMEOUT


class ConnectionLost(MessageFailed, ConnectionError):
    category = ErrorCategory.CONNECTION_LOST


_BY_CATEGORY = {
    ErrorCategory.UNROUTABLE: UnroutableError,
    ErrorCategory.REMOTE_EXCEPTION: RemoteException,
    ErrorCategory.TIMEOUT: DeliveryTimeout,
    ErrorCategory.CONNECTION_LOST: ConnectionLost,
}


def error_from_info(info: ErrorInfo) -> MessageFailed:
    return _BY_CATEGORY.get(info.category, MessageFailed)(info)
