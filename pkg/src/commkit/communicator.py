"""The user-facing communicator: tasks, RPC and broadcasts behind one object.

All broker I/O and every subscriber callback run on a hidden communication
thread owned by the communicator; the public methods are safe to call from
any thread.
"""
from __future__ import annotations

import concurrent.futures
import enum
import itertools
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Optional
from urllib.parse import unquote, urlsplit

from .envelope import (
    BroadcastFilter,
    Envelope,
    MessageKind,
    encode_envelope,
    new_correlation_id,
    parse_reply,
    reply_error,
    reply_ok,
)
from .exceptions import (
    AlreadyResolved,
    ClosedError,
    CommkitError,
    ConnectionLost,
    DuplicateIdentifier,
    EncodingError,
    ErrorCategory,
    ErrorInfo,
    UnknownSubscriber,
    UriError,
)
from .futures import Future
from .liveness import Backoff
from .loop import QueueLoop

__all__ = (
    "NO_RESPONSE",
    "ConnectOptions",
    "CommunicatorState",
    "SubscriberKind",
    "SubscriberToken",
    "Communicator",
    "connect",
)

_LOGGER = logging.getLogger(__name__)


class _NoResponse:
    def __repr__(self) -> str:
        return "NO_RESPONSE"


#: Returned by an RPC handler to signal that no answer should be sent back.
NO_RESPONSE = _NoResponse()


@dataclass
class ConnectOptions:
    heartbeat_interval: float = 60.0
    namespace: str = "commkit"
    task_queue: Optional[str] = None
    rpc_timeout: Optional[float] = None
    debug: bool = False
    send_buffer: int = 10_000
    connect_timeout: float = 10.0
    reconnect: Backoff = field(default_factory=Backoff)

    @property
    def task_queue_name(self) -> str:
        if self.task_queue is None:
            return f"{self.namespace}.tasks"
        return f"{self.namespace}.tasks.{self.task_queue}"


class CommunicatorState(enum.Enum):
    OPEN = "OPEN"
    CLOSING = "CLOSING"
    CLOSED = "CLOSED"


class SubscriberKind(enum.Enum):
    TASK = "TASK"
    RPC = "RPC"
    BROADCAST = "BROADCAST"


@dataclass(frozen=True)
class SubscriberToken:
    id: str
    kind: SubscriberKind


@dataclass(eq=False)
class _Subscriber:
    token: SubscriberToken
    handler: Callable
    key: Any = None
    filter: Optional[BroadcastFilter] = None
    removed: bool = False


@dataclass
class _PendingReply:
    future: Future
    timer: Any = None


class Communicator:
    """Task queue, RPC and broadcast messaging over one broker connection.

    Use :func:`connect` rather than constructing this directly.
    """

    _token_ids = itertools.count(1)

    def __init__(
        self,
        transport_factory: Callable,
        options: Optional[ConnectOptions] = None,
        loop_factory: Callable = QueueLoop,
    ):
        self._options = options or ConnectOptions()
        slow = self._options.heartbeat_interval if self._options.debug else None
        self._loop = loop_factory(debug_slow_callback=slow)
        self._lock = threading.RLock()
        self._idle = threading.Condition(self._lock)
        self._state = CommunicatorState.OPEN
        self._pending: Dict[str, _PendingReply] = {}
        self._subscribers: Dict[str, _Subscriber] = {}
        self._rpc: Dict[str, _Subscriber] = {}
        self._in_flight = 0
        try:
            self._transport = transport_factory(self._loop, self, self._options)
            self._transport.start()
        except BaseException:
            self._loop.stop(timeout=1.0)
            raise

    def __enter__(self) -> "Communicator":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    def __repr__(self) -> str:
        return f"<Communicator {self._state.value} {self._transport!r}>"

    @property
    def state(self) -> CommunicatorState:
        return self._state

    @property
    def options(self) -> ConnectOptions:
        return self._options

    @property
    def transport(self):
        return self._transport

    def is_closed(self) -> bool:
        return self._state is not CommunicatorState.OPEN

    def _check_open(self) -> None:
        if self._state is not CommunicatorState.OPEN:
            raise ClosedError(f"communicator is {self._state.value}")

    def _new_token(self, kind: SubscriberKind) -> SubscriberToken:
        return SubscriberToken(f"sub-{next(self._token_ids)}", kind)

    # region Tasks

    def task_send(self, payload: Any, no_reply: bool = False) -> Future:
        """Submit a task and return a future for the consumer's result.

        Returns once the broker has the task.  With ``no_reply`` the future is
        resolved with ``None`` at that point; otherwise it resolves with
        whatever the consuming handler returns.
        """
        self._check_open()
        env = Envelope(MessageKind.TASK, new_correlation_id(), payload, no_reply=no_reply)
        raw = encode_envelope(env)
        future = Future()
        if not no_reply:
            self._register_pending(env.correlation_id, future)
        try:
            self._transport.publish_task(env, raw, reply=not no_reply)
        except ConnectionLost as exc:
            self._drop_pending(env.correlation_id)
            future.set_error(exc)
            return future
        if no_reply:
            future.set_result(None)
        return future

    def add_task_subscriber(self, handler: Callable, prefetch: int = 1) -> SubscriberToken:
        """``handler(communicator, payload)`` returns the result, a future for it, or raises."""
        self._check_open()
        sub = _Subscriber(self._new_token(SubscriberKind.TASK), handler)
        with self._lock:
            self._subscribers[sub.token.id] = sub
        try:
            sub.key = self._transport.consume_tasks(prefetch, lambda *args: self._on_task(sub, *args))
        except BaseException:
            with self._lock:
                self._subscribers.pop(sub.token.id, None)
            raise
        return sub.token

    def remove_task_subscriber(self, token: SubscriberToken) -> None:
        sub = self._pop_subscriber(token, SubscriberKind.TASK)
        self._transport.cancel_consumer(sub.key)

    def _on_task(self, sub: _Subscriber, handle, env: Envelope, reply_to: Optional[str]) -> None:
        if sub.removed or self._state is not CommunicatorState.OPEN:
            self._transport.reject(handle, requeue=True)
            return
        self._begin()
        try:
            result = sub.handler(self, env.body)
        except Exception as exc:  # pylint: disable=broad-except
            self._finish_task(handle, env, reply_to, None, exc)
            return
        self._settle(result, lambda value, exc: self._finish_task(handle, env, reply_to, value, exc))

    def _finish_task(self, handle, env: Envelope, reply_to, value, exc) -> None:
        try:
            wants_reply = bool(reply_to) and not env.no_reply
            if exc is None and wants_reply:
                try:
                    reply = self._reply_envelope(MessageKind.TASK_REPLY, env, reply_ok(value))
                except EncodingError as enc_exc:
                    exc = enc_exc
            if exc is not None:
                _LOGGER.info("task handler failed: %s", exc)
                self._transport.reject(handle, requeue=False)
                if wants_reply:
                    info = ErrorInfo(ErrorCategory.REMOTE_EXCEPTION, _describe(exc))
                    self._transport.publish_reply(reply_to, *self._reply_envelope(
                        MessageKind.TASK_REPLY, env, reply_error(info)))
                return
            if wants_reply:
                self._transport.publish_reply(reply_to, *reply)
            self._transport.ack(handle)
        except CommkitError as err:
            _LOGGER.debug("could not settle task %s: %s", env.correlation_id, err)
        finally:
            self._end()

    # endregion

    # region RPC

    def rpc_send(self, recipient_id: str, payload: Any, timeout: Optional[float] = None) -> Future:
        """Send ``payload`` to the subscriber registered as ``recipient_id``.

        The future fails with UNROUTABLE when nobody holds that identifier and
        with TIMEOUT when ``timeout`` seconds pass without a reply.
        """
        self._check_open()
        if not recipient_id:
            raise ValueError("recipient_id must be non-empty")
        env = Envelope(MessageKind.RPC_REQUEST, new_correlation_id(), payload, recipient_id=recipient_id)
        raw = encode_envelope(env)
        future = Future()
        self._register_pending(env.correlation_id, future)
        try:
            self._transport.publish_rpc(env, raw)
        except ConnectionLost as exc:
            self._drop_pending(env.correlation_id)
            future.set_error(exc)
            return future
        timeout = self._options.rpc_timeout if timeout is None else timeout
        if timeout is not None:
            self._loop.call_soon(self._arm_timeout, env.correlation_id, timeout)
        return future

    def add_rpc_subscriber(self, handler: Callable, identifier: str) -> str:
        """``handler(communicator, payload)``; return :data:`NO_RESPONSE` to send nothing meaningful back."""
        self._check_open()
        if not identifier:
            raise ValueError("identifier must be non-empty")
        sub = _Subscriber(self._new_token(SubscriberKind.RPC), handler, key=identifier)
        with self._lock:
            if identifier in self._rpc:
                raise DuplicateIdentifier(f"RPC identifier {identifier!r} is already registered")
            self._rpc[identifier] = sub
        try:
            self._transport.bind_rpc(identifier, lambda env, reply_to: self._on_rpc(sub, env, reply_to))
        except BaseException:
            with self._lock:
                self._rpc.pop(identifier, None)
            raise
        return identifier

    def remove_rpc_subscriber(self, identifier: str) -> None:
        with self._lock:
            sub = self._rpc.pop(identifier, None)
            if sub is None:
                raise UnknownSubscriber(f"no RPC subscriber {identifier!r}")
            sub.removed = True
        self._transport.unbind_rpc(identifier)

    def _on_rpc(self, sub: _Subscriber, env: Envelope, reply_to: Optional[str]) -> None:
        if sub.removed or self._state is not CommunicatorState.OPEN:
            if reply_to and not env.no_reply:
                info = ErrorInfo(ErrorCategory.UNROUTABLE, f"subscriber {env.recipient_id!r} went away")
                self._send_reply_quietly(reply_to, self._reply_envelope(MessageKind.RPC_REPLY, env, reply_error(info)))
            return
        self._begin()
        try:
            result = sub.handler(self, env.body)
        except Exception as exc:  # pylint: disable=broad-except
            self._finish_rpc(env, reply_to, None, exc)
            return
        self._settle(result, lambda value, exc: self._finish_rpc(env, reply_to, value, exc))

    def _finish_rpc(self, env: Envelope, reply_to, value, exc) -> None:
        try:
            if not reply_to or env.no_reply:
                return
            if exc is None:
                if value is NO_RESPONSE:
                    value = None
                try:
                    reply = self._reply_envelope(MessageKind.RPC_REPLY, env, reply_ok(value))
                except EncodingError as enc_exc:
                    exc = enc_exc
            if exc is not None:
                info = ErrorInfo(ErrorCategory.REMOTE_EXCEPTION, _describe(exc))
                reply = self._reply_envelope(MessageKind.RPC_REPLY, env, reply_error(info))
            self._send_reply_quietly(reply_to, reply)
        finally:
            self._end()

    def _arm_timeout(self, correlation_id: str, timeout: float) -> None:
        with self._lock:
            entry = self._pending.get(correlation_id)
            if entry is None:
                return
            entry.timer = self._loop.call_later(timeout, self._expire, correlation_id, timeout)

    def _expire(self, correlation_id: str, timeout: float) -> None:
        entry = self._drop_pending(correlation_id)
        if entry is not None:
            _fail_quietly(entry.future, ErrorInfo(ErrorCategory.TIMEOUT, f"no reply within {timeout} s"))

    # endregion

    # region Broadcasts

    def broadcast_send(
        self,
        body: Any,
        sender: Optional[str] = None,
        subject: Optional[str] = None,
        correlation_id: Optional[str] = None,
    ) -> bool:
        self._check_open()
        env = Envelope(
            MessageKind.BROADCAST,
            correlation_id or new_correlation_id(),
            body,
            sender=sender,
            subject=subject,
        )
        return self._transport.publish_broadcast(env, encode_envelope(env))

    def add_broadcast_subscriber(
        self,
        handler: Callable,
        filter: Optional[BroadcastFilter] = None,  # pylint: disable=redefined-builtin
        *,
        sender: Optional[str] = None,
        subject: Optional[str] = None,
    ) -> SubscriberToken:
        """``handler(communicator, body, sender, subject, correlation_id)`` for each matching broadcast."""
        self._check_open()
        if filter is None:
            filter = BroadcastFilter(sender or "*", subject or "*")
        sub = _Subscriber(self._new_token(SubscriberKind.BROADCAST), handler, filter=filter)
        with self._lock:
            self._subscribers[sub.token.id] = sub
        try:
            sub.key = self._transport.bind_broadcast(filter, lambda env: self._on_broadcast(sub, env))
        except BaseException:
            with self._lock:
                self._subscribers.pop(sub.token.id, None)
            raise
        return sub.token

    def remove_broadcast_subscriber(self, token: SubscriberToken) -> None:
        sub = self._pop_subscriber(token, SubscriberKind.BROADCAST)
        self._transport.unbind_broadcast(sub.key)

    def _on_broadcast(self, sub: _Subscriber, env: Envelope) -> None:
        if sub.removed or self._state is not CommunicatorState.OPEN:
            return
        # Wire bindings are a superset of the glob filter; the filter decides.
        if not sub.filter.matches(env.sender, env.subject):
            return
        try:
            result = sub.handler(self, env.body, env.sender, env.subject, env.correlation_id)
        except Exception:  # pylint: disable=broad-except
            _LOGGER.exception("broadcast subscriber %s raised", sub.token.id)
            return
        if _is_deferred(result):
            self._settle(result, _log_broadcast_outcome)

    # endregion

    # region Shared plumbing

    def _pop_subscriber(self, token: SubscriberToken, kind: SubscriberKind) -> _Subscriber:
        with self._lock:
            sub = self._subscribers.get(getattr(token, "id", None))
            if sub is None or sub.token.kind is not kind:
                raise UnknownSubscriber(f"unknown {kind.value.lower()} subscriber {token!r}")
            del self._subscribers[sub.token.id]
            sub.removed = True
            return sub

    def _register_pending(self, correlation_id: str, future: Future) -> None:
        with self._lock:
            self._pending[correlation_id] = _PendingReply(future)

    def _drop_pending(self, correlation_id: str) -> Optional[_PendingReply]:
        with self._lock:
            entry = self._pending.pop(correlation_id, None)
        if entry is not None and entry.timer is not None:
            entry.timer.cancel()
        return entry

    def _on_reply(self, env: Envelope) -> None:
        """Apply a reply to its future; unknown or duplicate correlation ids are dropped."""
        entry = self._drop_pending(env.correlation_id)
        if entry is None:
            _LOGGER.debug("ignoring reply for unknown correlation id %s", env.correlation_id)
            return
        value, error = parse_reply(env.body)
        try:
            if error is None:
                entry.future.set_result(value)
            else:
                entry.future.set_error(error)
        except AlreadyResolved:
            pass

    @staticmethod
    def _reply_envelope(kind: MessageKind, request: Envelope, body) -> tuple:
        """Build and encode a reply; returns ``(envelope, raw)``."""
        reply = Envelope(kind, request.correlation_id, body)
        return reply, encode_envelope(reply)

    def _send_reply_quietly(self, reply_to: str, reply: tuple) -> None:
        try:
            self._transport.publish_reply(reply_to, *reply)
        except CommkitError as exc:
            _LOGGER.warning("could not send reply %s: %s", reply[0].correlation_id, exc)

    def _settle(self, result: Any, done: Callable[[Any, Optional[BaseException]], None]) -> None:
        """Call ``done(value, exc)`` on the loop once ``result`` is available."""
        if _is_deferred(result):
            result.add_done_callback(lambda fut: self._loop.call_soon(_unwrap, fut, done))
        else:
            done(result, None)

    def _begin(self) -> None:
        with self._lock:
            self._in_flight += 1

    def _end(self) -> None:
        with self._lock:
            self._in_flight -= 1
            if self._in_flight == 0:
                self._idle.notify_all()

    def _connection_lost(self, reason: str) -> None:
        """Called by the transport: replies can no longer reach us, fail everything waiting."""
        with self._lock:
            pending, self._pending = self._pending, {}
        for entry in pending.values():
            if entry.timer is not None:
                entry.timer.cancel()
            _fail_quietly(entry.future, ErrorInfo(ErrorCategory.CONNECTION_LOST, reason))

    # endregion

    def close(self, grace: float = 1.0) -> None:
        """Stop consuming, wait up to ``grace`` seconds for running handlers, then disconnect.

        Anything still unacknowledged afterwards is returned to the broker for
        redelivery elsewhere.  Calling close again is a no-op.
        """
        with self._lock:
            if self._state is not CommunicatorState.OPEN:
                return
            self._state = CommunicatorState.CLOSING
        if self._loop.in_thread:
            threading.Thread(target=self._shutdown, args=(grace,), name="commkit-close", daemon=True).start()
            return
        self._shutdown(grace)

    def _shutdown(self, grace: float) -> None:
        with self._lock:
            subs = list(self._subscribers.values()) + list(self._rpc.values())
            self._subscribers.clear()
            self._rpc.clear()
        for sub in subs:
            sub.removed = True
            try:
                if sub.token.kind is SubscriberKind.TASK:
                    self._transport.cancel_consumer(sub.key)
                elif sub.token.kind is SubscriberKind.RPC:
                    self._transport.unbind_rpc(sub.key)
                else:
                    self._transport.unbind_broadcast(sub.key)
            except CommkitError as exc:
                _LOGGER.debug("ignoring %s while unsubscribing", exc)
        deadline = time.monotonic() + grace
        with self._idle:
            while self._in_flight:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                self._idle.wait(remaining)
            abandoned = self._in_flight
        if abandoned:
            _LOGGER.info("closing with %d handler(s) still running; their deliveries will be requeued", abandoned)
        try:
            self._transport.close()
        except CommkitError as exc:
            _LOGGER.debug("ignoring %s while closing transport", exc)
        with self._lock:
            pending, self._pending = self._pending, {}
        for entry in pending.values():
            entry.future.cancel()
        self._loop.stop(timeout=max(0.1, min(grace, 1.0)))
        with self._lock:
            self._state = CommunicatorState.CLOSED


def _describe(exc: BaseException) -> str:
    info = getattr(exc, "info", None)
    if isinstance(info, ErrorInfo):
        return info.message
    return f"{type(exc).__name__}: {exc}"


def _fail_quietly(future: Future, info: ErrorInfo) -> None:
    try:
        future.set_error(info)
    except AlreadyResolved:
        pass


def _is_deferred(result: Any) -> bool:
    return isinstance(result, (Future, concurrent.futures.Future))


def _unwrap(fut, done) -> None:
    if isinstance(fut, Future):
        if fut.cancelled():
            done(None, concurrent.futures.CancelledError())
            return
        exc = fut.exception(0)
        done(None if exc else fut.result(0), exc)
        return
    if fut.cancelled():
        done(None, concurrent.futures.CancelledError())
        return
    exc = fut.exception()
    done(None if exc else fut.result(), exc)


def _log_broadcast_outcome(_value, exc) -> None:
    if exc is not None:
        _LOGGER.error("broadcast subscriber failed: %s", exc)


def connect(uri: str, broker=None, **options) -> Communicator:
    """Open a communicator from a URI in one call.

    ``local://<name>`` uses the in-process broker registered under ``name``
    (``default`` when omitted); pass ``broker=`` to use a specific
    :class:`~commkit.local.LocalBroker`.  ``amqp://`` and ``amqps://`` talk to
    a real broker.  Keyword options are those of :class:`ConnectOptions`.
    """
    opts = ConnectOptions(**options)
    if "://" not in uri:
        raise UriError(f"malformed URI {uri!r}")
    try:
        parts = urlsplit(uri)
        netloc = parts.netloc
        _ = parts.port
    except ValueError as exc:
        raise UriError(f"malformed URI {uri!r}: {exc}") from exc
    scheme = parts.scheme.lower()
    if scheme == "local":
        from .local import LocalBroker
        from .transport import LocalTransport

        name = unquote(netloc or parts.path.strip("/")) or "default"
        target = broker if broker is not None else LocalBroker.named(name)
        return Communicator(lambda loop, comm, o: LocalTransport(target, loop, comm, o), opts)
    if scheme in ("amqp", "amqps"):
        from .amqp import AmqpTransport

        from .loop import AsyncioLoop

        return Communicator(lambda loop, comm, o: AmqpTransport(uri, loop, comm, o), opts, AsyncioLoop)
    raise UriError(f"unsupported URI scheme {parts.scheme!r}; expected local, amqp or amqps")
