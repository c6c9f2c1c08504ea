"""Deterministic in-process broker.

:class:`TaskQueueState` is the pure queueing state machine (FIFO pending list,
per-consumer unacknowledged sets, ack/reject/requeue, round-robin dispatch).
:class:`LocalBroker` wraps one or more queues together with RPC routing,
broadcast fan-out and connection liveness, all serialised behind one lock.
Outbound hand-offs (delivery sinks, reply sinks) are queued while the lock
is held and run, in order, right after it is released; sinks should only
hand the message on (e.g. post it to an event loop).
"""
from __future__ import annotations

import collections
import itertools
import logging
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Deque, Dict, Iterable, List, Optional, Set, Tuple

from .envelope import (
    BroadcastFilter,
    Envelope,
    MessageKind,
    decode_envelope,
    reply_error,
)
from .exceptions import (
    DecodeError,
    DuplicateIdentifier,
    ErrorCategory,
    ErrorInfo,
    UnknownConsumer,
    UnknownDelivery,
    UnknownSubscriber,
)
from .liveness import Liveness, LivenessState

__all__ = (
    "Delivery",
    "ConsumerRecord",
    "DeadLetterStore",
    "TraceEvent",
    "TaskQueueState",
    "LocalBroker",
)

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class Delivery:
    tag: int
    envelope: Envelope
    reply_to: Optional[str] = None


@dataclass
class ConsumerRecord:
    consumer_id: str
    prefetch: int = 1
    in_flight: int = 0
    active: bool = True
    sink: Optional[Callable[[str, Delivery], None]] = field(default=None, repr=False)


class DeadLetterStore:
    """Append-only record of messages that were rejected or could not be decoded."""

    def __init__(self) -> None:
        self.entries: List[Tuple[Any, str]] = []

    def append(self, message: Any, reason: str) -> None:
        self.entries.append((message, reason))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


@dataclass(frozen=True)
class TraceEvent:
    seq: int
    kind: str
    tag: Optional[int]
    consumer: Optional[str]
    pending: int
    unacked: int
    redelivered: bool = False

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "event": self.kind,
            "tag": self.tag,
            "consumer": self.consumer,
            "pending": self.pending,
            "unacked": self.unacked,
            "redelivered": self.redelivered,
        }


class TaskQueueState:
    """Broker-side state of one task queue.

    Each enqueued message gets a delivery tag that is unique for the lifetime
    of the queue and stays with the message across requeues.  A tag lives in
    exactly one place: ``pending``, one consumer's ``unacked`` set, or it has
    been acknowledged / dead-lettered.
    """

    def __init__(
        self,
        name: str = "tasks",
        trace: Optional[Callable[[TraceEvent], None]] = None,
        dead_letters: Optional[DeadLetterStore] = None,
        auto_dispatch: bool = True,
    ):
        self.name = name
        self.pending: Deque[Delivery] = collections.deque()
        self.consumers: Dict[str, ConsumerRecord] = {}
        self.unacked: Dict[str, Dict[int, Delivery]] = {}
        self.dead_letters = dead_letters if dead_letters is not None else DeadLetterStore()
        self.next_tag = 1
        self.enqueued = 0
        self.acked = 0
        self.dead_lettered = 0
        self.auto_dispatch = auto_dispatch
        self._trace = trace
        self._seq = 0
        self._order: List[str] = []
        self._cursor = 0
        self._unacked_total = 0
        self._consumer_ids = itertools.count(1)

    # region Introspection

    @property
    def depth(self) -> int:
        """Messages held by the queue: pending plus unacknowledged."""
        return len(self.pending) + self._unacked_total

    @property
    def unacked_total(self) -> int:
        return self._unacked_total

    def pending_tags(self) -> List[int]:
        return [d.tag for d in self.pending]

    def unacked_tags(self, consumer_id: str) -> Set[int]:
        return set(self.unacked.get(consumer_id, ()))

    def conservation_holds(self) -> bool:
        return self.enqueued == len(self.pending) + self._unacked_total + self.acked + self.dead_lettered

    def check_invariants(self) -> List[str]:
        """Full scan for at-most-one placement, prefetch bounds and conservation."""
        problems = []
        seen: Dict[int, str] = {}
        for delivery in self.pending:
            if delivery.tag in seen:
                problems.append(f"tag {delivery.tag} appears twice in pending")
            seen[delivery.tag] = "pending"
        for cid, held in self.unacked.items():
            for tag in held:
                if tag in seen:
                    problems.append(f"tag {tag} held by {cid} and also in {seen[tag]}")
                seen[tag] = cid
            record = self.consumers.get(cid)
            if record is not None and len(held) > record.prefetch:
                problems.append(f"consumer {cid} holds {len(held)} > prefetch {record.prefetch}")
        if not self.conservation_holds():
            problems.append(
                f"conservation: enqueued={self.enqueued} pending={len(self.pending)} "
                f"unacked={self._unacked_total} acked={self.acked} dead={self.dead_lettered}"
            )
        return problems

    # endregion

    def _emit(self, kind: str, tag: Optional[int] = None, consumer: Optional[str] = None, redelivered=False):
        self._seq += 1
        if self._trace is not None:
            self._trace(
                TraceEvent(self._seq, kind, tag, consumer, len(self.pending), self._unacked_total, redelivered)
            )

    def _consumer(self, consumer_id: str) -> ConsumerRecord:
        try:
            return self.consumers[consumer_id]
        except KeyError:
            raise UnknownConsumer(consumer_id) from None

    def add_consumer(
        self,
        consumer_id: Optional[str] = None,
        prefetch: int = 1,
        sink: Optional[Callable[[str, Delivery], None]] = None,
    ) -> str:
        if prefetch < 1:
            raise ValueError("prefetch must be a positive integer")
        if consumer_id is None:
            consumer_id = f"c{next(self._consumer_ids)}"
        if consumer_id in self.consumers:
            raise ValueError(f"consumer {consumer_id!r} already registered")
        self.consumers[consumer_id] = ConsumerRecord(consumer_id, prefetch, sink=sink)
        self.unacked[consumer_id] = {}
        self._order.append(consumer_id)
        self._emit("consumer_added", consumer=consumer_id)
        if self.auto_dispatch:
            self.dispatch()
        return consumer_id

    def cancel_consumer(self, consumer_id: str) -> None:
        """Stop new deliveries; messages already held stay until acked, rejected or dropped."""
        record = self._consumer(consumer_id)
        record.active = False
        self._emit("consumer_cancelled", consumer=consumer_id)
        if not self.unacked[consumer_id]:
            self._remove_consumer(consumer_id)

    def _remove_consumer(self, consumer_id: str) -> None:
        idx = self._order.index(consumer_id)
        del self._order[idx]
        if idx < self._cursor:
            self._cursor -= 1
        if self._order:
            self._cursor %= len(self._order)
        else:
            self._cursor = 0
        del self.consumers[consumer_id]
        del self.unacked[consumer_id]
        self._emit("consumer_removed", consumer=consumer_id)

    def enqueue_task(self, env: Envelope, reply_to: Optional[str] = None) -> int:
        if env.kind is not MessageKind.TASK:
            raise ValueError(f"only TASK envelopes can be enqueued, got {env.kind.value}")
        tag = self.next_tag
        self.next_tag += 1
        self.pending.append(Delivery(tag, env, reply_to))
        self.enqueued += 1
        self._emit("enqueue", tag=tag)
        if self.auto_dispatch:
            self.dispatch()
        return tag

    def dispatch(self) -> List[Tuple[str, int]]:
        """Hand pending messages to consumers with free prefetch slots, round-robin."""
        assignments = []
        while self.pending and self._order:
            count = len(self._order)
            chosen = -1
            for step in range(count):
                idx = (self._cursor + step) % count
                record = self.consumers[self._order[idx]]
                if record.active and record.in_flight < record.prefetch:
                    chosen = idx
                    break
            if chosen < 0:
                break
            record = self.consumers[self._order[chosen]]
            delivery = self.pending.popleft()
            self.unacked[record.consumer_id][delivery.tag] = delivery
            record.in_flight += 1
            self._unacked_total += 1
            self._cursor = (chosen + 1) % count
            assignments.append((record.consumer_id, delivery.tag))
            self._emit("deliver", delivery.tag, record.consumer_id, delivery.envelope.redelivered)
            if record.sink is not None:
                record.sink(record.consumer_id, delivery)
        return assignments

    def _take(self, consumer_id: str, delivery_tag: int) -> Delivery:
        held = self.unacked.get(consumer_id)
        if held is None or delivery_tag not in held:
            raise UnknownDelivery(f"tag {delivery_tag} is not held by consumer {consumer_id!r}")
        delivery = held.pop(delivery_tag)
        self.consumers[consumer_id].in_flight -= 1
        self._unacked_total -= 1
        return delivery

    def _after_release(self, consumer_id: str) -> None:
        record = self.consumers.get(consumer_id)
        if record is not None and not record.active and not self.unacked[consumer_id]:
            self._remove_consumer(consumer_id)
        if self.auto_dispatch:
            self.dispatch()

    def acknowledge(self, consumer_id: str, delivery_tag: int) -> Delivery:
        delivery = self._take(consumer_id, delivery_tag)
        self.acked += 1
        self._emit("ack", delivery_tag, consumer_id)
        self._after_release(consumer_id)
        return delivery

    def reject(self, consumer_id: str, delivery_tag: int, requeue: bool) -> Delivery:
        delivery = self._take(consumer_id, delivery_tag)
        if requeue:
            self.pending.appendleft(replace(delivery, envelope=replace(delivery.envelope, redelivered=True)))
            self._emit("requeue", delivery_tag, consumer_id, True)
        else:
            self.dead_letters.append(delivery.envelope, "rejected")
            self.dead_lettered += 1
            self._emit("dead_letter", delivery_tag, consumer_id)
        self._after_release(consumer_id)
        return delivery

    def drop_consumer(self, consumer_id: str) -> int:
        """The consumer died: return everything it held to the head of pending."""
        self._consumer(consumer_id)
        held = list(self.unacked[consumer_id].values())
        self._unacked_total -= len(held)
        self.unacked[consumer_id] = {}
        self.consumers[consumer_id].in_flight = 0
        for delivery in reversed(held):
            self.pending.appendleft(replace(delivery, envelope=replace(delivery.envelope, redelivered=True)))
        for delivery in held:
            self._emit("requeue", delivery.tag, consumer_id, True)
        self._emit("consumer_dropped", consumer=consumer_id)
        self._remove_consumer(consumer_id)
        if self.auto_dispatch:
            self.dispatch()
        return len(held)


@dataclass
class _Connection:
    conn_id: str
    on_reply: Callable[[Envelope], None]
    on_lost: Optional[Callable[[], None]]
    liveness: LivenessState
    consumers: Set[Tuple[str, str]] = field(default_factory=set)
    rpc_ids: Set[str] = field(default_factory=set)
    broadcasts: Set[str] = field(default_factory=set)


@dataclass
class _BroadcastSub:
    conn_id: str
    filter: BroadcastFilter
    sink: Callable[[Envelope], None]


class _Critical:
    """Broker lock whose release drains the outbox of pending hand-offs."""

    __slots__ = ("_broker",)

    def __init__(self, broker: "LocalBroker"):
        self._broker = broker

    def __enter__(self):
        self._broker._lock.acquire()  # pylint: disable=protected-access

    def __exit__(self, *exc_info):
        self._broker._lock.release()  # pylint: disable=protected-access
        self._broker._flush()  # pylint: disable=protected-access


class LocalBroker:
    """In-process broker shared by every communicator connected to the same ``local://<name>``."""

    _registry: Dict[str, "LocalBroker"] = {}
    _registry_lock = threading.Lock()

    @classmethod
    def named(cls, name: str = "default") -> "LocalBroker":
        with cls._registry_lock:
            broker = cls._registry.get(name)
            if broker is None:
                broker = cls._registry[name] = cls(name)
            return broker

    @classmethod
    def discard(cls, name: str) -> None:
        with cls._registry_lock:
            cls._registry.pop(name, None)

    def __init__(self, name: str = "default", clock: Callable[[], float] = time.monotonic):
        self.name = name
        self.clock = clock
        self.dead_letters = DeadLetterStore()
        self.queues: Dict[str, TaskQueueState] = {}
        self._lock = threading.RLock()
        self._critical = _Critical(self)
        self._outbox: List[Tuple[Callable, tuple]] = []
        self._flush_lock = threading.Lock()
        self._connections: Dict[str, _Connection] = {}
        self._rpc: Dict[str, Tuple[str, Callable[[Envelope, Optional[str]], None]]] = {}
        self._broadcasts: Dict[str, _BroadcastSub] = {}
        self._ids = itertools.count(1)
        self._trace_hooks: List[Callable[[str, TraceEvent], None]] = []

    def __repr__(self) -> str:
        return f"<LocalBroker {self.name!r}>"

    def _defer(self, fn: Callable, *args) -> None:
        self._outbox.append((fn, args))

    def _deferring(self, sink: Callable) -> Callable:
        return lambda *args: self._outbox.append((sink, args))

    def _flush(self) -> None:
        # Whoever holds _flush_lock drains for everybody; the outer re-check
        # catches items appended just as the previous drainer let go.
        while self._outbox:
            if not self._flush_lock.acquire(blocking=False):
                return
            try:
                while True:
                    with self._lock:
                        batch, self._outbox = self._outbox, []
                    if not batch:
                        break
                    for fn, args in batch:
                        try:
                            fn(*args)
                        except Exception:  # pylint: disable=broad-except
                            _LOGGER.exception("%s: hand-off %r failed", self.name, fn)
            finally:
                self._flush_lock.release()

    # region Tracing

    def add_trace_hook(self, hook: Callable[[str, TraceEvent], None]) -> None:
        """``hook(queue_name, event)`` is called, under the broker lock, for every queue transition."""
        with self._critical:
            self._trace_hooks.append(hook)
            for name, state in self.queues.items():
                state._trace = self._make_tracer(name)  # pylint: disable=protected-access

    def remove_trace_hook(self, hook) -> None:
        with self._critical:
            self._trace_hooks.remove(hook)
            if not self._trace_hooks:
                for state in self.queues.values():
                    state._trace = None  # pylint: disable=protected-access

    def _make_tracer(self, queue_name: str):
        def tracer(event: TraceEvent) -> None:
            for hook in self._trace_hooks:
                hook(queue_name, event)

        return tracer

    # endregion

    def queue(self, name: str) -> TaskQueueState:
        with self._critical:
            state = self.queues.get(name)
            if state is None:
                tracer = self._make_tracer(name) if self._trace_hooks else None
                state = TaskQueueState(name, trace=tracer, dead_letters=self.dead_letters)
                self.queues[name] = state
            return state

    def queue_depth(self, name: str) -> int:
        with self._critical:
            state = self.queues.get(name)
            return 0 if state is None else state.depth

    # region Connections and liveness

    def open_connection(
        self,
        on_reply: Callable[[Envelope], None],
        on_lost: Optional[Callable[[], None]] = None,
        heartbeat_interval: float = 60.0,
    ) -> str:
        with self._critical:
            conn_id = f"conn-{next(self._ids)}"
            liveness = LivenessState(heartbeat_interval, self.clock())
            self._connections[conn_id] = _Connection(conn_id, on_reply, on_lost, liveness)
            return conn_id

    def is_connected(self, conn_id: str) -> bool:
        with self._critical:
            return conn_id in self._connections

    def close_connection(self, conn_id: str, lost: bool = False) -> bool:
        """Tear down a connection; unacked deliveries go back to their queues."""
        with self._critical:
            conn = self._connections.pop(conn_id, None)
            if conn is None:
                return False
            for queue_name, cid in sorted(conn.consumers):
                state = self.queues[queue_name]
                if cid in state.consumers:
                    state.drop_consumer(cid)
            for identifier in conn.rpc_ids:
                self._rpc.pop(identifier, None)
            for sub_id in conn.broadcasts:
                self._broadcasts.pop(sub_id, None)
        if lost and conn.on_lost is not None:
            try:
                conn.on_lost()
            except Exception:  # pylint: disable=broad-except
                _LOGGER.exception("on_lost callback for %s failed", conn_id)
        return True

    def heartbeat(self, conn_id: str, now: Optional[float] = None) -> None:
        with self._critical:
            conn = self._connections.get(conn_id)
            if conn is not None:
                conn.liveness.record_activity(self.clock() if now is None else now)

    def reap(self, now: Optional[float] = None) -> List[str]:
        """Drop every connection that has missed two heartbeat intervals."""
        with self._critical:
            now = self.clock() if now is None else now
            dead = [cid for cid, conn in self._connections.items() if conn.liveness.check(now) is Liveness.DEAD]
        for conn_id in dead:
            _LOGGER.info("%s: connection %s missed heartbeats, dropping it", self.name, conn_id)
            self.close_connection(conn_id, lost=True)
        return dead

    def _connection(self, conn_id: str) -> _Connection:
        try:
            return self._connections[conn_id]
        except KeyError:
            raise UnknownConsumer(f"connection {conn_id!r} is not open") from None

    # endregion

    # region Task queues

    def publish_task(self, queue_name: str, raw: bytes, reply_to: Optional[str] = None) -> Optional[int]:
        """Enqueue an encoded TASK; undecodable messages are dead-lettered and yield ``None``."""
        try:
            env = decode_envelope(raw)
            if env.kind is not MessageKind.TASK:
                raise DecodeError(f"{env.kind.value} envelope published to task queue")
        except DecodeError as exc:
            with self._critical:
                self.dead_letters.append(raw, f"undecodable: {exc}")
            return None
        with self._critical:
            return self.queue(queue_name).enqueue_task(env, reply_to)

    def publish_envelope(self, queue_name: str, env: Envelope, reply_to: Optional[str] = None) -> int:
        """Enqueue an already-decoded TASK envelope (in-process producers skip the JSON round trip)."""
        with self._critical:
            return self.queue(queue_name).enqueue_task(env, reply_to)

    def consume(
        self,
        conn_id: str,
        queue_name: str,
        sink: Callable[[str, Delivery], None],
        prefetch: int = 1,
    ) -> str:
        with self._critical:
            conn = self._connection(conn_id)
            state = self.queue(queue_name)
            cid = state.add_consumer(f"{conn_id}/{next(self._ids)}", prefetch, self._deferring(sink))
            conn.consumers.add((queue_name, cid))
            return cid

    def cancel(self, queue_name: str, consumer_id: str) -> None:
        with self._critical:
            self.queue(queue_name).cancel_consumer(consumer_id)

    def ack(self, queue_name: str, consumer_id: str, tag: int) -> None:
        with self._critical:
            self.queue(queue_name).acknowledge(consumer_id, tag)

    def reject(self, queue_name: str, consumer_id: str, tag: int, requeue: bool) -> None:
        with self._critical:
            self.queue(queue_name).reject(consumer_id, tag, requeue)

    # endregion

    # region RPC

    def bind_rpc(self, conn_id: str, identifier: str, sink: Callable[[Envelope, Optional[str]], None]) -> None:
        if not identifier:
            raise ValueError("RPC identifier must be non-empty")
        with self._critical:
            conn = self._connection(conn_id)
            if identifier in self._rpc:
                raise DuplicateIdentifier(f"RPC identifier {identifier!r} is already registered")
            self._rpc[identifier] = (conn_id, self._deferring(sink))
            conn.rpc_ids.add(identifier)

    def unbind_rpc(self, conn_id: str, identifier: str) -> None:
        with self._critical:
            entry = self._rpc.get(identifier)
            if entry is None or entry[0] != conn_id:
                raise UnknownSubscriber(f"no RPC subscriber {identifier!r} on {conn_id}")
            del self._rpc[identifier]
            self._connections[conn_id].rpc_ids.discard(identifier)

    def publish_rpc(self, raw: bytes, reply_to: Optional[str] = None) -> bool:
        try:
            env = decode_envelope(raw)
        except DecodeError as exc:
            with self._critical:
                self.dead_letters.append(raw, f"undecodable: {exc}")
            return False
        return self.route_rpc(env, reply_to)

    def route_rpc(self, env: Envelope, reply_to: Optional[str] = None) -> bool:
        """Deliver to the unique subscriber for ``env.recipient_id`` or reply UNROUTABLE."""
        if env.kind is not MessageKind.RPC_REQUEST:
            raise ValueError("route_rpc needs an RPC_REQUEST envelope")
        with self._critical:
            entry = self._rpc.get(env.recipient_id)
            if entry is not None:
                entry[1](env, reply_to)
                return True
            if reply_to is not None and not env.no_reply:
                info = ErrorInfo(ErrorCategory.UNROUTABLE, f"no subscriber for {env.recipient_id!r}")
                reply = Envelope(MessageKind.RPC_REPLY, env.correlation_id, reply_error(info))
                self._send_reply(reply_to, reply)
            return False

    # endregion

    # region Replies

    def _send_reply(self, reply_to: str, env: Envelope) -> bool:
        conn = self._connections.get(reply_to)
        if conn is None:
            return False
        self._defer(conn.on_reply, env)
        return True

    def publish_reply(self, reply_to: str, raw: bytes) -> bool:
        try:
            env = decode_envelope(raw)
        except DecodeError as exc:
            with self._critical:
                self.dead_letters.append(raw, f"undecodable: {exc}")
            return False
        with self._critical:
            return self._send_reply(reply_to, env)

    # endregion

    # region Broadcasts

    def bind_broadcast(self, conn_id: str, filt: BroadcastFilter, sink: Callable[[Envelope], None]) -> str:
        with self._critical:
            conn = self._connection(conn_id)
            sub_id = f"bcast-{next(self._ids)}"
            self._broadcasts[sub_id] = _BroadcastSub(conn_id, filt, self._deferring(sink))
            conn.broadcasts.add(sub_id)
            return sub_id

    def unbind_broadcast(self, conn_id: str, sub_id: str) -> None:
        with self._critical:
            sub = self._broadcasts.get(sub_id)
            if sub is None or sub.conn_id != conn_id:
                raise UnknownSubscriber(sub_id)
            del self._broadcasts[sub_id]
            self._connections[conn_id].broadcasts.discard(sub_id)

    def publish_broadcast(self, raw: bytes) -> int:
        try:
            env = decode_envelope(raw)
        except DecodeError as exc:
            with self._critical:
                self.dead_letters.append(raw, f"undecodable: {exc}")
            return 0
        with self._critical:
            return self.fanout_broadcast(list(self._broadcasts.values()), env, raw)

    @staticmethod
    def fanout_broadcast(subscribers: Iterable, env: Envelope, raw: Optional[bytes] = None) -> int:
        """One copy to every subscriber whose filter matches; returns how many received it.

        When ``raw`` is given each subscriber gets its own decoded copy so that
        handlers can't observe each other's mutations.
        """
        if env.kind is not MessageKind.BROADCAST:
            raise ValueError("fanout_broadcast needs a BROADCAST envelope")
        delivered = 0
        for sub in subscribers:
            if sub.filter.matches(env.sender, env.subject):
                sub.sink(decode_envelope(raw) if raw is not None and delivered else env)
                delivered += 1
        return delivered

    # endregion

    def snapshot(self, queue_name: str) -> dict:
        """Plain-data view of a queue, handy in tests and golden traces."""
        with self._critical:
            state = self.queue(queue_name)
            return {
                "pending": state.pending_tags(),
                "unacked": {cid: sorted(held) for cid, held in state.unacked.items()},
                "acked": state.acked,
                "dead_lettered": state.dead_lettered,
            }
