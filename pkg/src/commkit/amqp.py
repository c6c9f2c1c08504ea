"""AMQP 0-9-1 backend built on pika's asyncio adapter.

Naming (``ns`` is the namespace, ``commkit`` by default)::

    <ns>.tasks[.<name>]   durable work queue, manual ack, persistent messages
    <ns>.rpc.<id>         exclusive auto-delete queue per RPC identifier
    <ns>.reply.<random>   exclusive auto-delete reply queue per communicator
    <ns>.broadcast        topic exchange, routing key "<sender>.<subject>"

Everything here runs on the communicator's asyncio thread; the public
transport methods marshal onto it and, where the caller needs an answer,
block the calling thread until the broker has replied.
"""
from __future__ import annotations

import asyncio
import collections
import concurrent.futures
import dataclasses
import itertools
import logging
import secrets
from typing import Any, Callable, Deque, Dict, List, Optional, Tuple

import pika
import pika.exceptions
from pika.adapters.asyncio_connection import AsyncioConnection

from .envelope import BroadcastFilter, Envelope, MessageKind, decode_envelope, reply_error
from .exceptions import (
    BrokerConnectionError,
    DecodeError,
    ConnectionLost,
    DuplicateIdentifier,
    ErrorCategory,
    ErrorInfo,
    NotConfirmed,
    UriError,
)

__all__ = (
    "Topology",
    "broadcast_routing_key",
    "binding_pattern",
    "heartbeat_seconds",
    "AmqpTransport",
)

_LOGGER = logging.getLogger(__name__)

_RESOURCE_LOCKED = 405
_NULL_WORD = "_"


@dataclasses.dataclass(frozen=True)
class Topology:
    """Broker object names for one communicator; a pure function of its inputs."""

    namespace: str = "commkit"
    task_queue_suffix: Optional[str] = None
    reply_token: str = dataclasses.field(default_factory=lambda: secrets.token_hex(8))

    @property
    def task_queue(self) -> str:
        if self.task_queue_suffix is None:
            return f"{self.namespace}.tasks"
        return f"{self.namespace}.tasks.{self.task_queue_suffix}"

    def rpc_queue(self, identifier: str) -> str:
        return f"{self.namespace}.rpc.{identifier}"

    @property
    def reply_queue(self) -> str:
        return f"{self.namespace}.reply.{self.reply_token}"

    @property
    def broadcast_exchange(self) -> str:
        return f"{self.namespace}.broadcast"

    def names(self) -> List[str]:
        return [self.task_queue, self.reply_queue, self.broadcast_exchange]


def broadcast_routing_key(sender: Optional[str], subject: Optional[str]) -> str:
    return f"{_NULL_WORD if sender is None else sender}.{_NULL_WORD if subject is None else subject}"


def _glob_words(pattern: str) -> List[str]:
    return ["#" if "*" in word else word for word in pattern.split(".")]


def binding_pattern(filt: BroadcastFilter) -> str:
    """Topic binding key admitting every routing key the filter could match.

    A glob ``*`` may span dots, so any word holding one widens to ``#``;
    literal words are delimited by literal dots and stay exact.  The result
    is a superset of the filter, which the client then applies exactly.
    """
    words = _glob_words(filt.sender) + _glob_words(filt.subject)
    collapsed: List[str] = []
    for word in words:
        if word == "#" and collapsed and collapsed[-1] == "#":
            continue
        collapsed.append(word)
    return ".".join(collapsed)


def heartbeat_seconds(interval: float) -> int:
    """AMQP negotiates whole seconds; sub-second intervals round up to one."""
    return max(1, int(round(interval)))


class _ChannelClosed(Exception):
    def __init__(self, reason: BaseException):
        super().__init__(str(reason))
        self.reason = reason

    @property
    def reply_code(self) -> Optional[int]:
        return getattr(self.reason, "reply_code", None)


class _Channel:
    """A pika channel whose callback-style methods can be awaited."""

    def __init__(self, channel):
        self.raw = channel
        self.closed: Optional[BaseException] = None
        self._waiters: set = set()
        channel.add_on_close_callback(self._on_close)

    def _on_close(self, _channel, reason: BaseException) -> None:
        self.closed = reason
        waiters, self._waiters = self._waiters, set()
        for fut in waiters:
            if not fut.done():
                fut.set_exception(_ChannelClosed(reason))

    def call(self, method: str, *args, **kwargs) -> "asyncio.Future":
        fut = asyncio.get_running_loop().create_future()
        if self.closed is not None:
            fut.set_exception(_ChannelClosed(self.closed))
            return fut
        self._waiters.add(fut)

        def done(frame):
            self._waiters.discard(fut)
            if not fut.done():
                fut.set_result(frame)

        getattr(self.raw, method)(*args, callback=done, **kwargs)
        return fut

    @property
    def is_open(self) -> bool:
        return self.closed is None and self.raw.is_open

    def close(self) -> None:
        if self.is_open:
            try:
                self.raw.close()
            except pika.exceptions.AMQPError:
                pass


@dataclasses.dataclass(eq=False)
class _TaskConsumer:
    prefetch: int
    sink: Callable
    channel: Optional[_Channel] = None
    tag: Optional[str] = None
    unacked: int = 0
    cancelled: bool = False


@dataclasses.dataclass(eq=False)
class _BroadcastBinding:
    filter: BroadcastFilter
    sink: Callable
    channel: Optional[_Channel] = None


class AmqpTransport:
    """Communicator transport speaking AMQP 0-9-1 through one pika connection."""

    threadsafe = True

    def __init__(self, uri: str, loop, comm, options):
        try:
            self._params = pika.URLParameters(uri)
        except Exception as exc:  # pika raises a mix of ValueError/TypeError/AMQPError here
            raise UriError(f"invalid AMQP URI {uri!r}: {exc}") from exc
        self._params.heartbeat = heartbeat_seconds(options.heartbeat_interval)
        self._params.socket_timeout = options.connect_timeout
        self._params.blocked_connection_timeout = None
        self._uri = uri
        self._loop = loop
        self._comm = comm
        self._options = options
        self.topology = Topology(options.namespace, options.task_queue)
        self._conn: Optional[AsyncioConnection] = None
        self._connected = False
        self._closing = False
        self._gave_up = False
        self._generation = 0
        self._confirm_ch: Optional[_Channel] = None
        self._pub_ch: Optional[_Channel] = None
        self._sub_ch: Optional[_Channel] = None
        self._confirm_seq = 0
        self._confirms: "collections.OrderedDict[int, concurrent.futures.Future]" = collections.OrderedDict()
        self._buffer: Deque[Tuple[Callable, tuple]] = collections.deque()
        self._keys = itertools.count(1)
        self._consumers: Dict[int, _TaskConsumer] = {}
        self._rpc: Dict[str, Tuple[Callable, Optional[_Channel]]] = {}
        self._broadcasts: Dict[int, _BroadcastBinding] = {}
        self._reconnect_attempt = 0
        self._closed_event: Optional[asyncio.Event] = None

    def __repr__(self) -> str:
        state = "connected" if self._connected else "disconnected"
        return f"<AmqpTransport {self._params.host}:{self._params.port} {state}>"

    @property
    def reply_address(self) -> str:
        return self.topology.reply_queue

    @property
    def aloop(self) -> asyncio.AbstractEventLoop:
        return self._loop.loop

    # region Marshalling

    def _call(self, coro_fn: Callable, *args, timeout: Optional[float] = None) -> Any:
        """Run ``coro_fn(*args)`` on the loop; block for the result unless already on it."""
        if self._loop.in_thread:
            task = asyncio.ensure_future(coro_fn(*args))
            task.add_done_callback(_log_task_failure)
            return None
        return self._loop.run_coro(coro_fn(*args), timeout)

    # endregion

    # region Connection lifecycle

    def start(self) -> None:
        try:
            self._loop.run_coro(self._connect(), self._options.connect_timeout + 1.0)
        except concurrent.futures.TimeoutError as exc:
            self._loop.call_soon(self._abort_connection)
            raise BrokerConnectionError(f"timed out connecting to {self._params.host}:{self._params.port}") from exc

    def _abort_connection(self) -> None:
        if self._conn is not None and not self._conn.is_closed:
            try:
                self._conn.close()
            except pika.exceptions.AMQPError:
                pass

    async def _open_connection(self) -> AsyncioConnection:
        fut = self.aloop.create_future()

        def opened(conn):
            if not fut.done():
                fut.set_result(conn)

        def failed(_conn, exc):
            if not fut.done():
                fut.set_exception(BrokerConnectionError(f"cannot connect to {self._params.host}:{self._params.port}: {exc!r}"))

        conn = AsyncioConnection(
            self._params,
            on_open_callback=opened,
            on_open_error_callback=failed,
            on_close_callback=self._on_connection_closed,
            custom_ioloop=self.aloop,
        )
        self._conn = conn
        return await fut

    async def _channel(self) -> _Channel:
        fut = self.aloop.create_future()
        self._conn.channel(on_open_callback=lambda ch: fut.done() or fut.set_result(ch))
        return _Channel(await fut)

    async def _connect(self) -> None:
        await self._open_connection()
        self._generation += 1
        try:
            await self._declare_topology()
        except _ChannelClosed as exc:
            raise BrokerConnectionError(f"topology declaration failed: {exc}") from exc
        self._connected = True
        self._reconnect_attempt = 0

    async def _declare_topology(self) -> None:
        topo = self.topology
        self._confirm_ch = await self._channel()
        self._confirm_seq = 0
        self._confirm_ch.raw.confirm_delivery(self._on_confirm)
        await self._confirm_ch.call("queue_declare", topo.task_queue, durable=True)
        self._pub_ch = await self._channel()
        self._pub_ch.raw.add_on_return_callback(self._on_return)
        await self._pub_ch.call("exchange_declare", topo.broadcast_exchange, exchange_type="topic")
        self._sub_ch = await self._channel()
        await self._sub_ch.call("queue_declare", topo.reply_queue, exclusive=True, auto_delete=True)
        self._sub_ch.raw.basic_consume(topo.reply_queue, self._on_reply_message, auto_ack=True)
        for consumer in self._consumers.values():
            await self._start_consumer(consumer)
        for identifier in list(self._rpc):
            try:
                await self._declare_rpc(identifier)
            except DuplicateIdentifier:
                _LOGGER.error("RPC identifier %r was taken while disconnected", identifier)
                self._rpc.pop(identifier, None)
        for binding in self._broadcasts.values():
            await self._start_broadcast(binding)

    def _on_connection_closed(self, conn, reason: BaseException) -> None:
        if conn is not self._conn:
            return
        was_connected, self._connected = self._connected, False
        self._fail_confirms(reason)
        if self._closing:
            if self._closed_event is not None:
                self._closed_event.set()
            return
        if not was_connected:
            return  # a failed (re)connect attempt; its caller handles retries
        _LOGGER.warning("AMQP connection lost: %s", reason)
        self._comm._connection_lost(f"AMQP connection lost: {reason}")  # pylint: disable=protected-access
        self._schedule_reconnect()

    def _schedule_reconnect(self) -> None:
        policy = self._options.reconnect
        if policy.max_attempts is not None and self._reconnect_attempt >= policy.max_attempts:
            _LOGGER.error("giving up on %s after %d reconnect attempts", self._params.host, self._reconnect_attempt)
            self._gave_up = True
            self._drain_buffer_failed("reconnect attempts exhausted")
            return
        delay = policy.delay(self._reconnect_attempt)
        self._reconnect_attempt += 1
        self.aloop.call_later(delay, lambda: asyncio.ensure_future(self._reconnect()))

    async def _reconnect(self) -> None:
        if self._closing:
            return
        try:
            await asyncio.wait_for(self._connect(), self._options.connect_timeout)
        except (BrokerConnectionError, asyncio.TimeoutError, _ChannelClosed) as exc:
            _LOGGER.info("reconnect attempt %d failed: %s", self._reconnect_attempt, exc)
            self._abort_connection()
            self._schedule_reconnect()
            return
        _LOGGER.info("reconnected to %s", self._params.host)
        self._flush_buffer()

    def _fail_confirms(self, reason) -> None:
        confirms, self._confirms = self._confirms, collections.OrderedDict()
        for fut in confirms.values():
            if not fut.done():
                fut.set_exception(ConnectionLost(f"connection lost before confirmation: {reason}"))

    # endregion

    # region Send buffering

    def _submit(self, fn: Callable, *args) -> None:
        """Run a send on the loop now, or buffer it while disconnected."""
        if self._gave_up or self._closing:
            raise ConnectionLost("connection is closed")
        if self._connected:
            fn(*args)
            return
        if len(self._buffer) >= self._options.send_buffer:
            raise ConnectionLost(f"send buffer full ({self._options.send_buffer} messages) while reconnecting")
        self._buffer.append((fn, args))

    def _flush_buffer(self) -> None:
        while self._buffer and self._connected:
            fn, args = self._buffer.popleft()
            try:
                fn(*args)
            except Exception:  # pylint: disable=broad-except
                _LOGGER.exception("buffered send failed")

    def _drain_buffer_failed(self, reason: str) -> None:
        self._buffer.clear()
        self._comm._connection_lost(reason)  # pylint: disable=protected-access

    def _on_loop(self, fn: Callable, *args) -> Any:
        if self._loop.in_thread:
            return fn(*args)
        return self._loop.run_sync(fn, *args, timeout=self._options.connect_timeout)

    # endregion

    # region Tasks

    def publish_task(self, env: Envelope, raw: bytes, reply: bool) -> None:
        """Publish persistently; blocks for the broker's confirm when connected."""
        confirm = self._on_loop(self._submit_task, raw, env.correlation_id, reply)
        if confirm is None or self._loop.in_thread:
            return
        try:
            confirm.result(self._options.connect_timeout)
        except concurrent.futures.TimeoutError as exc:
            raise NotConfirmed(f"no confirm for task {env.correlation_id}") from exc

    def _submit_task(self, raw: bytes, correlation_id: str, reply: bool) -> Optional[concurrent.futures.Future]:
        box: List[concurrent.futures.Future] = []
        self._submit(lambda: box.append(self._publish_task_now(raw, correlation_id, reply)))
        return box[0] if box else None

    def _publish_task_now(self, raw: bytes, correlation_id: str, reply: bool) -> concurrent.futures.Future:
        props = pika.BasicProperties(
            delivery_mode=2,
            correlation_id=correlation_id,
            reply_to=self.topology.reply_queue if reply else None,
            content_type="application/json",
        )
        self._confirm_ch.raw.basic_publish("", self.topology.task_queue, raw, props)
        self._confirm_seq += 1
        fut: concurrent.futures.Future = concurrent.futures.Future()
        self._confirms[self._confirm_seq] = fut
        return fut

    def _on_confirm(self, frame) -> None:
        method = frame.method
        acked = isinstance(method, pika.spec.Basic.Ack)
        tags = [t for t in self._confirms if t <= method.delivery_tag] if method.multiple else [method.delivery_tag]
        for tag in tags:
            fut = self._confirms.pop(tag, None)
            if fut is None or fut.done():
                continue
            if acked:
                fut.set_result(None)
            else:
                fut.set_exception(NotConfirmed(f"broker nacked publish {tag}"))

    def consume_tasks(self, prefetch: int, sink: Callable) -> int:
        consumer = _TaskConsumer(prefetch, sink)
        key = next(self._keys)
        self._on_loop(self._consumers.__setitem__, key, consumer)
        self._call(self._start_if_connected, consumer, timeout=self._options.connect_timeout)
        return key

    async def _start_if_connected(self, consumer: _TaskConsumer) -> None:
        if self._connected and not (consumer.channel and consumer.channel.is_open):
            await self._start_consumer(consumer)

    async def _start_consumer(self, consumer: _TaskConsumer) -> None:
        # One channel per consumer so each gets its own basic.qos prefetch.
        channel = await self._channel()
        await channel.call("basic_qos", prefetch_count=consumer.prefetch)
        consumer.channel = channel
        consumer.unacked = 0
        generation = self._generation

        def on_message(_ch, method, props, body):
            try:
                env = decode_envelope(body)
            except DecodeError as exc:
                _LOGGER.error("dead-lettering undecodable task: %s", exc)
                channel.raw.basic_reject(method.delivery_tag, requeue=False)
                return
            if method.redelivered:
                env = dataclasses.replace(env, redelivered=True)
            consumer.unacked += 1
            consumer.sink((consumer, channel, generation, method.delivery_tag), env, props.reply_to)

        consumer.tag = channel.raw.basic_consume(self.topology.task_queue, on_message, auto_ack=False)

    def cancel_consumer(self, key: int) -> None:
        self._on_loop(self._cancel_consumer, key)

    def _cancel_consumer(self, key: int) -> None:
        consumer = self._consumers.pop(key, None)
        if consumer is None:
            return
        consumer.cancelled = True
        channel = consumer.channel
        if channel is None or not channel.is_open:
            return
        try:
            channel.raw.basic_cancel(consumer.tag)
        except pika.exceptions.AMQPError:
            pass
        if consumer.unacked == 0:
            channel.close()

    def _settle_delivery(self, handle, action: Callable[[Any, int], None]) -> None:
        consumer, channel, generation, tag = handle
        if generation != self._generation or channel is not consumer.channel or not channel.is_open:
            _LOGGER.debug("stale delivery %s ignored; the broker has requeued it", tag)
            return
        try:
            action(channel.raw, tag)
        except pika.exceptions.AMQPError as exc:
            _LOGGER.debug("could not settle delivery %s: %s", tag, exc)
        consumer.unacked -= 1
        if consumer.cancelled and consumer.unacked == 0:
            channel.close()

    def ack(self, handle) -> None:
        self._loop.call_soon(self._settle_delivery, handle, lambda ch, tag: ch.basic_ack(tag))

    def reject(self, handle, requeue: bool) -> None:
        self._loop.call_soon(self._settle_delivery, handle, lambda ch, tag: ch.basic_reject(tag, requeue=requeue))

    # endregion

    # region RPC

    def bind_rpc(self, identifier: str, sink: Callable) -> None:
        self._call(self._bind_rpc, identifier, sink, timeout=self._options.connect_timeout)

    async def _bind_rpc(self, identifier: str, sink: Callable) -> None:
        if identifier in self._rpc:
            raise DuplicateIdentifier(f"RPC identifier {identifier!r} is already bound")
        self._rpc[identifier] = (sink, None)
        if not self._connected:
            return
        try:
            await self._declare_rpc(identifier)
        except BaseException:
            self._rpc.pop(identifier, None)
            raise

    async def _declare_rpc(self, identifier: str) -> None:
        # A separate channel: RESOURCE_LOCKED on an exclusive queue closes it.
        sink, _old = self._rpc[identifier]
        channel = await self._channel()
        queue = self.topology.rpc_queue(identifier)
        try:
            await channel.call("queue_declare", queue, exclusive=True, auto_delete=True)
        except _ChannelClosed as exc:
            if exc.reply_code == _RESOURCE_LOCKED:
                raise DuplicateIdentifier(f"RPC identifier {identifier!r} is held by another communicator") from exc
            raise

        def on_message(_ch, _method, props, body):
            try:
                env = decode_envelope(body)
            except DecodeError as exc:
                _LOGGER.error("dropping undecodable RPC request: %s", exc)
                return
            sink(env, props.reply_to)

        channel.raw.basic_consume(queue, on_message, auto_ack=True)
        self._rpc[identifier] = (sink, channel)

    def unbind_rpc(self, identifier: str) -> None:
        self._on_loop(self._unbind_rpc, identifier)

    def _unbind_rpc(self, identifier: str) -> None:
        entry = self._rpc.pop(identifier, None)
        if entry is not None and entry[1] is not None:
            entry[1].close()

    def publish_rpc(self, env: Envelope, raw: bytes) -> None:
        self._on_loop(self._submit, self._publish_rpc_now, env, raw)

    def _publish_rpc_now(self, env: Envelope, raw: bytes) -> None:
        props = pika.BasicProperties(
            correlation_id=env.correlation_id,
            reply_to=self.topology.reply_queue,
            content_type="application/json",
        )
        self._pub_ch.raw.basic_publish("", self.topology.rpc_queue(env.recipient_id), raw, props, mandatory=True)

    def _on_return(self, _channel, method, _props, body) -> None:
        try:
            env = decode_envelope(body)
        except DecodeError:
            return
        if env.kind is not MessageKind.RPC_REQUEST:
            return
        info = ErrorInfo(ErrorCategory.UNROUTABLE, f"no subscriber for {env.recipient_id!r} ({method.reply_text})")
        reply = Envelope(MessageKind.RPC_REPLY, env.correlation_id, reply_error(info))
        self._comm._on_reply(reply)  # pylint: disable=protected-access

    def publish_reply(self, reply_to: str, env: Envelope, raw: bytes) -> None:
        self._on_loop(self._submit, self._publish_reply_now, reply_to, env, raw)

    def _publish_reply_now(self, reply_to: str, env: Envelope, raw: bytes) -> None:
        props = pika.BasicProperties(correlation_id=env.correlation_id, content_type="application/json")
        self._pub_ch.raw.basic_publish("", reply_to, raw, props)

    def _on_reply_message(self, _ch, _method, _props, body) -> None:
        try:
            env = decode_envelope(body)
        except DecodeError as exc:
            _LOGGER.error("dropping undecodable reply: %s", exc)
            return
        self._comm._on_reply(env)  # pylint: disable=protected-access

    # endregion

    # region Broadcasts

    def bind_broadcast(self, filt: BroadcastFilter, sink: Callable) -> int:
        binding = _BroadcastBinding(filt, sink)
        key = next(self._keys)
        self._on_loop(self._broadcasts.__setitem__, key, binding)
        self._call(self._start_broadcast_if_connected, binding, timeout=self._options.connect_timeout)
        return key

    async def _start_broadcast_if_connected(self, binding: _BroadcastBinding) -> None:
        if self._connected and not (binding.channel and binding.channel.is_open):
            await self._start_broadcast(binding)

    async def _start_broadcast(self, binding: _BroadcastBinding) -> None:
        channel = await self._channel()
        frame = await channel.call("queue_declare", "", exclusive=True, auto_delete=True)
        queue = frame.method.queue
        await channel.call("queue_bind", queue, self.topology.broadcast_exchange, routing_key=binding_pattern(binding.filter))

        def on_message(_ch, _method, _props, body):
            try:
                env = decode_envelope(body)
            except DecodeError as exc:
                _LOGGER.error("dropping undecodable broadcast: %s", exc)
                return
            binding.sink(env)

        channel.raw.basic_consume(queue, on_message, auto_ack=True)
        binding.channel = channel

    def unbind_broadcast(self, key: int) -> None:
        self._on_loop(self._unbind_broadcast, key)

    def _unbind_broadcast(self, key: int) -> None:
        binding = self._broadcasts.pop(key, None)
        if binding is not None and binding.channel is not None:
            binding.channel.close()

    def publish_broadcast(self, env: Envelope, raw: bytes) -> bool:
        self._on_loop(self._submit, self._publish_broadcast_now, env, raw)
        return True

    def _publish_broadcast_now(self, env: Envelope, raw: bytes) -> None:
        props = pika.BasicProperties(correlation_id=env.correlation_id, content_type="application/json")
        key = broadcast_routing_key(env.sender, env.subject)
        self._pub_ch.raw.basic_publish(self.topology.broadcast_exchange, key, raw, props)

    # endregion

    def abort(self) -> None:
        """Drop the socket without closing the AMQP session, as a crashed process would."""
        def drop():
            self._closing = True
            transport = getattr(self._conn, "_transport", None)
            sock = getattr(transport, "_sock", None)
            if sock is not None:
                sock.close()
            self._abort_connection()

        self._on_loop(drop)

    def close(self) -> None:
        if self._loop.in_thread:
            self._closing = True
            self._abort_connection()
            return
        try:
            self._loop.run_coro(self._close(), self._options.connect_timeout)
        except concurrent.futures.TimeoutError:
            _LOGGER.warning("AMQP connection did not close cleanly in time")

    async def _close(self) -> None:
        self._closing = True
        if self._conn is None or self._conn.is_closed:
            return
        self._closed_event = asyncio.Event()
        self._abort_connection()
        await self._closed_event.wait()


def _log_task_failure(task: "asyncio.Task") -> None:
    if not task.cancelled() and task.exception() is not None:
        _LOGGER.error("AMQP operation failed: %s", task.exception())

