"""Single-assignment, thread-safe future used as the result of every send."""
from __future__ import annotations

import enum
import logging
import threading
import time
from concurrent.futures import CancelledError
from typing import Any, Callable, List, Optional

from .exceptions import AlreadyResolved, ErrorCategory, ErrorInfo, error_from_info

__all__ = ("FutureState", "Future", "CancelledError")

_LOGGER = logging.getLogger(__name__)


class FutureState(enum.Enum):
    PENDING = "PENDING"
    RESOLVED = "RESOLVED"
    FAILED = "FAILED"
    CANCELLED = "CANCELLED"


class Future:
    """A deferred value that can be resolved from one thread and awaited from others.

    Exactly one of :meth:`set_result`, :meth:`set_error` or :meth:`cancel` wins.
    Later assignments raise :class:`AlreadyResolved` and leave the state alone.
    """

    def __init__(self) -> None:
        self._cond = threading.Condition(threading.Lock())
        self._state = FutureState.PENDING
        self._value: Any = None
        self._error: Optional[ErrorInfo] = None
        self._callbacks: List[Callable[["Future"], None]] = []

    def __repr__(self) -> str:
        return f"<Future {self._state.value}>"

    @property
    def state(self) -> FutureState:
        return self._state

    @property
    def error(self) -> Optional[ErrorInfo]:
        return self._error

    def done(self) -> bool:
        return self._state is not FutureState.PENDING

    def cancelled(self) -> bool:
        return self._state is FutureState.CANCELLED

    def _transition(self, state: FutureState, value: Any = None, error: Optional[ErrorInfo] = None) -> bool:
        with self._cond:
            if self._state is not FutureState.PENDING:
                return False
            self._state = state
            self._value = value
            self._error = error
            callbacks, self._callbacks = self._callbacks, []
            self._cond.notify_all()
        for callback in callbacks:
            self._run_callback(callback)
        return True

    def _run_callback(self, callback) -> None:
        try:
            callback(self)
        except Exception:  # pylint: disable=broad-except
            _LOGGER.exception("future callback %r raised", callback)

    def set_result(self, value: Any) -> None:
        if not self._transition(FutureState.RESOLVED, value=value):
            raise AlreadyResolved(f"future already {self._state.value}")

    def set_error(self, error: ErrorInfo | BaseException) -> None:
        if isinstance(error, BaseException):
            info = getattr(error, "info", None)
            if not isinstance(info, ErrorInfo):
                info = ErrorInfo(ErrorCategory.REMOTE_EXCEPTION, f"{type(error).__name__}: {error}")
            error = info
        if not self._transition(FutureState.FAILED, error=error):
            raise AlreadyResolved(f"future already {self._state.value}")

    def cancel(self) -> bool:
        return self._transition(FutureState.CANCELLED, error=ErrorInfo(ErrorCategory.CANCELLED, "cancelled"))

    def wait(self, timeout: Optional[float] = None) -> bool:
        """Block until terminal; return False if the timeout expired first."""
        with self._cond:
            if timeout is None:
                while self._state is FutureState.PENDING:
                    self._cond.wait()
                return True
            deadline = time.monotonic() + timeout
            while self._state is FutureState.PENDING:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return False
                self._cond.wait(remaining)
            return True

    def result(self, timeout: Optional[float] = None) -> Any:
        if not self.wait(timeout):
            raise TimeoutError(f"future not resolved within {timeout} s")
        if self._state is FutureState.RESOLVED:
            return self._value
        if self._state is FutureState.CANCELLED:
            raise CancelledError()
        raise error_from_info(self._error)

    def exception(self, timeout: Optional[float] = None):
        if not self.wait(timeout):
            raise TimeoutError(f"future not resolved within {timeout} s")
        if self._state is FutureState.FAILED:
            return error_from_info(self._error)
        if self._state is FutureState.CANCELLED:
            raise CancelledError()
        return None

    def add_done_callback(self, callback: Callable[["Future"], None]) -> None:
        """Run ``callback(self)`` once terminal, immediately if already done."""
        with self._cond:
            if self._state is FutureState.PENDING:
                self._callbacks.append(callback)
                return
        self._run_callback(callback)
