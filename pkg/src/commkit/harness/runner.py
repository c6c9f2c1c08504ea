"""Deterministic scenario execution against a fresh :class:`LocalBroker`.

The runner owns a virtual clock (integer milliseconds keep the heartbeat
boundary exact) and an agenda of future actions.  Actions due at the same
instant run in a fixed order: handler completions, then liveness checks,
then heartbeat silences ending, then graceful-close deadlines.
"""
from __future__ import annotations

import enum
import heapq
import itertools
import json
from dataclasses import dataclass, field
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Set, Tuple, Union

from ..envelope import Envelope, MessageKind
from ..exceptions import ScenarioError, TraceMismatch, UnknownConsumer, UnknownDelivery
from ..local import Delivery, LocalBroker, TraceEvent
from .scenario import EventKind, Scenario, Event

__all__ = ("TaskOutcome", "AuditReport", "run_scenario", "replay_trace", "write_trace", "read_trace")

QUEUE = "harness.tasks"

_COMPLETE, _CHECK, _SILENCE_END, _CLOSE_DEADLINE = range(4)
_MAX_STEPS = 5_000_000


class TaskOutcome(str, enum.Enum):
    ACKED_ONCE = "ACKED_ONCE"
    DEAD_LETTERED = "DEAD_LETTERED"
    PENDING = "PENDING"
    LOST = "LOST"
    DUPLICATED = "DUPLICATED"


@dataclass
class AuditReport:
    outcomes: Dict[int, TaskOutcome]
    violations: List[str]
    trace: List[dict]
    redelivered: FrozenSet[int]
    requeued: FrozenSet[int]
    executions: int = 0
    stale_acks: int = 0
    end_time: Any = 0
    seed: int = 0

    @property
    def counts(self) -> Dict[str, int]:
        counts = {outcome.value: 0 for outcome in TaskOutcome}
        for outcome in self.outcomes.values():
            counts[outcome.value] += 1
        return counts

    @property
    def passed(self) -> bool:
        counts = self.counts
        return not self.violations and counts["LOST"] == 0 and counts["DUPLICATED"] == 0

    def serials(self, outcome: TaskOutcome) -> List[int]:
        return sorted(s for s, o in self.outcomes.items() if o is outcome)

    def summary(self) -> str:
        counts = self.counts
        lines = [
            f"seed {self.seed}: {len(self.outcomes)} tasks, end time {self.end_time}",
            "outcomes: " + " ".join(f"{name}={counts[name]}" for name in counts),
            f"redelivered={len(self.redelivered)} requeued={len(self.requeued)} "
            f"executions={self.executions} stale_acks={self.stale_acks} trace_records={len(self.trace)}",
        ]
        lines += [f"violation: {v}" for v in self.violations] or ["violations: none"]
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "counts": self.counts,
            "violations": list(self.violations),
            "redelivered": sorted(self.redelivered),
            "requeued": sorted(self.requeued),
            "executions": self.executions,
            "stale_acks": self.stale_acks,
            "end_time": self.end_time,
            "passed": self.passed,
        }


@dataclass(eq=False)
class _Consumer:
    name: str
    prefetch: int
    work: Any
    hang: bool
    conn: Optional[str] = None
    cid: Optional[str] = None
    alive: bool = True
    closing: bool = False
    silent_until: Any = None
    buffered: List[Tuple[str, int, int]] = field(default_factory=list)


class _Run:
    def __init__(self, scenario: Scenario, record_trace: bool):
        scenario.validate()
        self.scenario = scenario
        self.interval = scenario.heartbeat_interval
        self.poison: Set[int] = set(scenario.poison)
        self.now: Any = 0
        self.broker = LocalBroker(f"harness-{scenario.seed}", clock=lambda: self.now)
        self.state = self.broker.queue(QUEUE)
        self.agenda: List[tuple] = []
        self.seq = itertools.count()
        self.consumers: List[_Consumer] = []
        self.by_conn: Dict[str, _Consumer] = {}
        self.record = record_trace
        self.trace: List[dict] = []
        self.violations: List[str] = []
        self.serial_of_tag: Dict[int, int] = {}
        self.tag_of_serial: Dict[int, int] = {}
        self.acks: Dict[int, int] = {}
        self.dead: Set[int] = set()
        self.redelivered: Set[int] = set()
        self.requeued: Set[int] = set()
        self.executions = 0
        self.stale_acks = 0
        self.next_serial = 1
        self.broker.add_trace_hook(self._on_trace)

    # region Trace and audit

    def _on_trace(self, _queue: str, event: TraceEvent) -> None:
        if self.record:
            rec = event.to_dict()
            rec["t"] = self.now
            self.trace.append(rec)
        kind = event.kind
        if kind == "ack":
            serial = self.serial_of_tag[event.tag]
            self.acks[serial] = self.acks.get(serial, 0) + 1
        elif kind == "dead_letter":
            self.dead.add(self.serial_of_tag[event.tag])
        elif kind == "deliver" and event.redelivered:
            self.redelivered.add(self.serial_of_tag[event.tag])
        if not self.state.conservation_holds():
            self.violations.append(f"t={self.now} seq={event.seq}: conservation broken after {kind}")

    def _note(self, event: str, **fields) -> None:
        if self.record:
            rec = {"t": self.now, "event": event}
            rec.update(fields)
            self.trace.append(rec)

    def _audit(self, label: str) -> None:
        for problem in self.state.check_invariants():
            self.violations.append(f"t={self.now} after {label}: {problem}")

    # endregion

    # region Agenda

    def _schedule(self, when, priority: int, action, *args) -> None:
        heapq.heappush(self.agenda, (when, priority, next(self.seq), action, args))

    def _run_until(self, limit) -> None:
        """Run agenda actions due at or before ``limit`` (everything when None)."""
        steps = 0
        while self.agenda and (limit is None or self.agenda[0][0] <= limit):
            when, _prio, _seq, action, args = heapq.heappop(self.agenda)
            self.now = max(self.now, when)
            action(*args)
            self._audit(action.__name__)
            steps += 1
            if steps > _MAX_STEPS:
                self.violations.append("agenda did not quiesce")
                self.agenda.clear()
        if limit is not None:
            self.now = max(self.now, limit)

    # endregion

    # region Consumers

    def _connect(self, consumer: _Consumer) -> None:
        consumer.conn = self.broker.open_connection(lambda env: None, None, self.interval)
        self.by_conn[consumer.conn] = consumer
        # Dispatch can happen inside consume(), so the sink carries the consumer itself.
        sink = lambda cid, delivery: self._deliver(consumer, cid, delivery)  # noqa: E731
        consumer.cid = self.broker.consume(consumer.conn, QUEUE, sink, consumer.prefetch)

    def _connected(self, consumer: _Consumer) -> bool:
        return consumer.conn is not None and self.broker.is_connected(consumer.conn)

    def _deliver(self, consumer: _Consumer, cid: str, delivery: Delivery) -> None:
        serial = self.serial_of_tag[delivery.tag]
        if not consumer.hang:
            self._schedule(self.now + consumer.work, _COMPLETE, self._complete, consumer, cid, delivery.tag, serial)

    def _held(self, consumer: _Consumer) -> List[int]:
        if consumer.cid is None:
            return []
        return [self.serial_of_tag[tag] for tag in self.state.unacked.get(consumer.cid, {})]

    def _disconnect(self, consumer: _Consumer, reason: str) -> None:
        if not self._connected(consumer):
            return
        held = self._held(consumer)
        self.requeued.update(held)
        self._note("disconnect", consumer=consumer.name, reason=reason, requeued=sorted(held))
        self.broker.close_connection(consumer.conn)

    def _settle(self, consumer: _Consumer, cid: str, tag: int, serial: int) -> None:
        try:
            if serial in self.poison:
                self.broker.reject(QUEUE, cid, tag, requeue=False)
            else:
                self.broker.ack(QUEUE, cid, tag)
        except (UnknownDelivery, UnknownConsumer):
            # The broker already took the message back; this is the late ack of a presumed-dead consumer.
            self.stale_acks += 1
            self._note("stale_ack", consumer=consumer.name, tag=tag)
        if consumer.closing and self._connected(consumer) and consumer.cid not in self.state.consumers:
            self._note("closed", consumer=consumer.name)
            self.broker.close_connection(consumer.conn)
            consumer.alive = False

    def _complete(self, consumer: _Consumer, cid: str, tag: int, serial: int) -> None:
        if not consumer.alive:
            return
        self.executions += 1
        if consumer.silent_until is not None:
            consumer.buffered.append((cid, tag, serial))
            return
        self._settle(consumer, cid, tag, serial)

    def _check(self) -> None:
        for consumer in self.consumers:
            if consumer.alive and consumer.silent_until is None and self._connected(consumer):
                self.broker.heartbeat(consumer.conn, self.now)
        doomed = {}
        for consumer in self.consumers:
            if consumer.silent_until is not None and self._connected(consumer):
                doomed[consumer.conn] = self._held(consumer)
        for conn in self.broker.reap(self.now):
            consumer = self.by_conn[conn]
            held = doomed.get(conn, [])
            self.requeued.update(held)
            self._note("reaped", consumer=consumer.name, requeued=sorted(held))

    def _silence_end(self, consumer: _Consumer, until) -> None:
        if consumer.silent_until != until:
            return
        consumer.silent_until = None
        buffered, consumer.buffered = consumer.buffered, []
        if not consumer.alive:
            return
        self._note("silence_end", consumer=consumer.name)
        if self._connected(consumer):
            self.broker.heartbeat(consumer.conn, self.now)
            for cid, tag, serial in buffered:
                self._settle(consumer, cid, tag, serial)
            return
        self.stale_acks += len(buffered)
        if consumer.closing:
            consumer.alive = False
            return
        self._note("reconnect", consumer=consumer.name)
        self._connect(consumer)

    def _close_deadline(self, consumer: _Consumer) -> None:
        if not consumer.alive:
            return
        self._disconnect(consumer, "grace expired")
        consumer.alive = False

    # endregion

    # region Script events

    def _consumer(self, name: str) -> _Consumer:
        return self.consumers[int(name[1:]) - 1]

    def apply(self, event: Event) -> None:
        kind = event.kind
        if kind is EventKind.SPAWN_CONSUMER:
            consumer = _Consumer(
                f"c{len(self.consumers) + 1}", event.get("prefetch"), event.get("work"), event.get("hang")
            )
            self.consumers.append(consumer)
            self._note("spawn", consumer=consumer.name)
            self._connect(consumer)
        elif kind is EventKind.SUBMIT_TASKS:
            for _ in range(event.get("count")):
                serial = self.next_serial
                self.next_serial += 1
                env = Envelope(MessageKind.TASK, f"task-{serial}", {"serial": serial}, no_reply=True)
                tag = self.state.next_tag
                self.serial_of_tag[tag] = serial
                self.tag_of_serial[serial] = tag
                self.broker.publish_envelope(QUEUE, env)
        elif kind is EventKind.KILL_CONSUMER:
            consumer = self._consumer(event.get("id"))
            self._note("kill", consumer=consumer.name)
            if consumer.alive:
                consumer.alive = False
                consumer.buffered.clear()
                self._disconnect(consumer, "killed")
        elif kind is EventKind.GRACEFUL_CLOSE:
            consumer = self._consumer(event.get("id"))
            self._note("close", consumer=consumer.name, grace=event.get("grace"))
            if not consumer.alive or consumer.closing:
                return
            consumer.closing = True
            if not self._connected(consumer):
                if consumer.silent_until is None:
                    consumer.alive = False
                return
            self.broker.cancel(QUEUE, consumer.cid)
            if consumer.cid not in self.state.consumers and consumer.silent_until is None:
                self._note("closed", consumer=consumer.name)
                self.broker.close_connection(consumer.conn)
                consumer.alive = False
            else:
                self._schedule(self.now + event.get("grace"), _CLOSE_DEADLINE, self._close_deadline, consumer)
        elif kind is EventKind.SILENCE_HEARTBEAT:
            consumer = self._consumer(event.get("id"))
            duration = event.get("duration")
            self._note("silence", consumer=consumer.name, duration=duration)
            if not consumer.alive or not self._connected(consumer):
                return
            until = self.now + duration
            if consumer.silent_until is None:
                self.broker.heartbeat(consumer.conn, self.now)
                self._schedule(self.now + 2 * self.interval, _CHECK, self._check)
            elif until <= consumer.silent_until:
                return
            consumer.silent_until = until
            self._schedule(until, _SILENCE_END, self._silence_end, consumer, until)
        elif kind is EventKind.ADVANCE_TIME:
            self._run_until(self.now + event.get("duration"))

    # endregion

    def execute(self) -> AuditReport:
        for index, event in enumerate(self.scenario.events):
            if event.at is not None:
                if event.at < self.now:
                    raise ScenarioError(f"event {index} at {event.at} is in the past (now {self.now})")
                self._run_until(event.at)
            self.apply(event)
            self._audit(f"event {index} ({event.kind.value})")
        self._run_until(None)
        return self.report()

    def report(self) -> AuditReport:
        pending = set(self.state.pending_tags())
        for held in self.state.unacked.values():
            pending.update(held)
        outcomes: Dict[int, TaskOutcome] = {}
        for serial in range(1, self.next_serial):
            acks = self.acks.get(serial, 0)
            if acks > 1:
                outcomes[serial] = TaskOutcome.DUPLICATED
            elif acks == 1:
                outcomes[serial] = TaskOutcome.ACKED_ONCE
            elif serial in self.dead:
                outcomes[serial] = TaskOutcome.DEAD_LETTERED
            elif self.tag_of_serial[serial] in pending:
                outcomes[serial] = TaskOutcome.PENDING
            else:
                outcomes[serial] = TaskOutcome.LOST
        report = AuditReport(
            outcomes=outcomes,
            violations=list(self.violations),
            trace=self.trace,
            redelivered=frozenset(self.redelivered),
            requeued=frozenset(self.requeued),
            executions=self.executions,
            stale_acks=self.stale_acks,
            end_time=self.now,
            seed=self.scenario.seed,
        )
        if self.scenario.expected is not None:
            report.violations += self.scenario.expected.mismatches(report.counts, len(report.redelivered))
        return report


def run_scenario(scenario: Scenario, record_trace: bool = True) -> AuditReport:
    """Execute ``scenario`` under the virtual clock and audit every step."""
    return _Run(scenario, record_trace).execute()


def _canonical(record: Any) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def write_trace(scenario: Scenario, report: AuditReport, target) -> None:
    """Trace file: a ``{"scenario": ...}`` header, then one record per line."""
    lines = [_canonical({"scenario": scenario.to_dict()})] + [_canonical(rec) for rec in report.trace]
    text = "\n".join(lines) + "\n"
    if isinstance(target, str):
        with open(target, "w", encoding="utf-8") as handle:
            handle.write(text)
    else:
        target.write(text)


def read_trace(source: Union[str, Iterable[str]]) -> Tuple[Scenario, List[dict]]:
    if isinstance(source, str):
        with open(source, encoding="utf-8") as handle:
            return read_trace(list(handle))
    records = []
    for number, line in enumerate(source, 1):
        line = line.strip()
        if not line:
            continue
        try:
            records.append(json.loads(line))
        except ValueError as exc:
            raise ScenarioError(f"trace line {number}: not JSON ({exc})") from exc
    if not records or not isinstance(records[0], dict) or "scenario" not in records[0]:
        raise ScenarioError("trace must start with a {\"scenario\": ...} header")
    return Scenario.from_dict(records[0]["scenario"]), records[1:]


def replay_trace(source: Union[str, Iterable[str]]) -> AuditReport:
    """Re-run the trace's scenario and demand the identical sequence of records."""
    scenario, expected = read_trace(source)
    report = run_scenario(scenario)
    actual = report.trace
    for index in range(max(len(expected), len(actual))):
        want = expected[index] if index < len(expected) else None
        got = actual[index] if index < len(actual) else None
        if want is None or got is None or _canonical(want) != _canonical(got):
            raise TraceMismatch(index, want, got)
    return report

