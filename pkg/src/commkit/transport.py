"""Transport for the in-process :class:`~commkit.local.LocalBroker`.

A transport moves envelopes between a communicator and a broker.  The
communicator calls it from user threads (``threadsafe`` transports) or from
its loop; every inbound message is handed to the communicator on its loop.
"""
from __future__ import annotations

import itertools
import logging
import threading
import time
from typing import Callable, Dict, Optional, Tuple

from .envelope import BroadcastFilter, Envelope
from .exceptions import ConnectionLost, DuplicateIdentifier, UnknownConsumer, UnknownDelivery, UnknownSubscriber
from .local import Delivery, LocalBroker

__all__ = ("LocalTransport",)

_LOGGER = logging.getLogger(__name__)


class LocalTransport:
    threadsafe = True

    def __init__(self, broker: LocalBroker, loop, comm, options):
        self.broker = broker
        self._loop = loop
        self._comm = comm
        self._queue = options.task_queue_name
        self._interval = options.heartbeat_interval
        self._lock = threading.RLock()
        self._keys = itertools.count(1)
        self._conn: Optional[str] = None
        self._closed = False
        self._silent_until = 0.0
        self._timer = None
        # key -> [prefetch, sink, broker consumer id]
        self._consumers: Dict[int, list] = {}
        self._rpc: Dict[str, Callable] = {}
        # key -> [filter, sink, broker subscription id]
        self._broadcasts: Dict[int, list] = {}

    def __repr__(self) -> str:
        return f"<LocalTransport {self.broker.name}:{self._conn}>"

    @property
    def connection_id(self) -> Optional[str]:
        return self._conn

    @property
    def reply_address(self) -> Optional[str]:
        return self._conn

    def start(self) -> None:
        self._open()
        self._loop.call_soon(self._beat)

    def _open(self) -> None:
        self._conn = self.broker.open_connection(self._post_reply, self._on_lost, self._interval)

    def _live_conn(self) -> str:
        if self._closed or self._conn is None:
            raise ConnectionLost("connection is closed")
        return self._conn

    def _post_reply(self, env: Envelope) -> None:
        self._loop.call_soon(self._comm._on_reply, env)  # pylint: disable=protected-access

    # region Heartbeats

    def _beat(self) -> None:
        if self._closed:
            return
        if time.monotonic() >= self._silent_until:
            self.broker.heartbeat(self._conn)
        self.broker.reap()
        self._timer = self._loop.call_later(self._interval, self._beat)

    def suspend_heartbeats(self, seconds: float) -> None:
        """Stop heartbeating for a while, as if the link went quiet (fault injection)."""
        self._silent_until = time.monotonic() + seconds

    def _on_lost(self) -> None:
        self._loop.call_soon(self._reconnect)

    def _reconnect(self) -> None:
        if self._closed:
            return
        _LOGGER.warning("local connection %s was dropped by the broker, reconnecting", self._conn)
        self._comm._connection_lost("connection dropped by broker")  # pylint: disable=protected-access
        with self._lock:
            self._silent_until = 0.0
            self._open()
            for key, entry in self._consumers.items():
                entry[2] = self.broker.consume(self._conn, self._queue, self._delivery_sink(key, entry[1]), entry[0])
            for identifier, sink in list(self._rpc.items()):
                try:
                    self.broker.bind_rpc(self._conn, identifier, self._rpc_sink(sink))
                except DuplicateIdentifier:
                    _LOGGER.error("RPC identifier %r was taken while disconnected", identifier)
                    del self._rpc[identifier]
            for entry in self._broadcasts.values():
                entry[2] = self.broker.bind_broadcast(self._conn, entry[0], self._broadcast_sink(entry[1]))

    # endregion

    # region Tasks

    def publish_task(self, env: Envelope, raw: bytes, reply: bool) -> None:
        with self._lock:
            conn = self._live_conn()
        self.broker.publish_task(self._queue, raw, conn if reply else None)

    def _delivery_sink(self, key: int, sink: Callable) -> Callable[[str, Delivery], None]:
        def deliver(consumer_id: str, delivery: Delivery) -> None:
            self._loop.call_soon(sink, (consumer_id, delivery.tag), delivery.envelope, delivery.reply_to)

        return deliver

    def consume_tasks(self, prefetch: int, sink: Callable) -> int:
        with self._lock:
            conn = self._live_conn()
            key = next(self._keys)
            entry = [prefetch, sink, None]
            self._consumers[key] = entry
            entry[2] = self.broker.consume(conn, self._queue, self._delivery_sink(key, sink), prefetch)
            return key

    def cancel_consumer(self, key: int) -> None:
        with self._lock:
            entry = self._consumers.pop(key, None)
        if entry is None:
            return
        try:
            self.broker.cancel(self._queue, entry[2])
        except UnknownConsumer:
            pass

    def ack(self, handle: Tuple[str, int]) -> None:
        try:
            self.broker.ack(self._queue, *handle)
        except (UnknownDelivery, UnknownConsumer):
            _LOGGER.debug("stale ack for %s ignored", handle)

    def reject(self, handle: Tuple[str, int], requeue: bool) -> None:
        try:
            self.broker.reject(self._queue, handle[0], handle[1], requeue)
        except (UnknownDelivery, UnknownConsumer):
            _LOGGER.debug("stale reject for %s ignored", handle)

    # endregion

    # region RPC

    def _rpc_sink(self, sink: Callable) -> Callable:
        return lambda env, reply_to: self._loop.call_soon(sink, env, reply_to)

    def bind_rpc(self, identifier: str, sink: Callable) -> None:
        with self._lock:
            self.broker.bind_rpc(self._live_conn(), identifier, self._rpc_sink(sink))
            self._rpc[identifier] = sink

    def unbind_rpc(self, identifier: str) -> None:
        with self._lock:
            self._rpc.pop(identifier, None)
            conn = self._conn
        try:
            self.broker.unbind_rpc(conn, identifier)
        except UnknownSubscriber:
            pass

    def publish_rpc(self, env: Envelope, raw: bytes) -> None:
        with self._lock:
            conn = self._live_conn()
        self.broker.publish_rpc(raw, conn)

    def publish_reply(self, reply_to: str, env: Envelope, raw: bytes) -> None:
        with self._lock:
            self._live_conn()
        self.broker.publish_reply(reply_to, raw)

    # endregion

    # region Broadcasts

    def _broadcast_sink(self, sink: Callable) -> Callable:
        return lambda env: self._loop.call_soon(sink, env)

    def bind_broadcast(self, filt: BroadcastFilter, sink: Callable) -> int:
        with self._lock:
            conn = self._live_conn()
            key = next(self._keys)
            self._broadcasts[key] = [filt, sink, self.broker.bind_broadcast(conn, filt, self._broadcast_sink(sink))]
            return key

    def unbind_broadcast(self, key: int) -> None:
        with self._lock:
            entry = self._broadcasts.pop(key, None)
            conn = self._conn
        if entry is None:
            return
        try:
            self.broker.unbind_broadcast(conn, entry[2])
        except UnknownSubscriber:
            pass

    def publish_broadcast(self, env: Envelope, raw: bytes) -> bool:
        with self._lock:
            self._live_conn()
        self.broker.publish_broadcast(raw)
        return True

    # endregion

    def abort(self) -> None:
        """Vanish without a goodbye, as if the process had been killed."""
        with self._lock:
            self._closed = True
            conn = self._conn
        self._loop.call_soon(self._cancel_timer)
        if conn is not None:
            self.broker.close_connection(conn)

    def close(self) -> None:
        self.abort()

    def _cancel_timer(self) -> None:
        if self._timer is not None:
            self._timer.cancel()
