"""Run a scenario against real communicators, threads and wall-clock time.

Only the terminal report is meaningful here: thread scheduling makes the
trace itself nondeterministic.
"""
from __future__ import annotations

import concurrent.futures
import threading
import time
from typing import Dict, List, Set

from ..communicator import Communicator, connect
from ..local import LocalBroker, TraceEvent
from .runner import AuditReport, TaskOutcome
from .scenario import EventKind, Scenario

__all__ = ("stress_scenario",)


class _PoisonTask(Exception):
    pass


def stress_scenario(scenario: Scenario, time_scale: float = 1.0, settle_timeout: float = 10.0) -> AuditReport:
    """Execute ``scenario`` with ``time_scale`` real milliseconds per virtual one."""
    scenario.validate()
    ms = time_scale / 1000.0
    broker = LocalBroker(f"stress-{scenario.seed}")
    queue_name = "commkit.tasks"
    lock = threading.Lock()
    serial_of_tag: Dict[int, int] = {}
    acks: Dict[int, int] = {}
    dead: Set[int] = set()
    redelivered: Set[int] = set()
    violations: List[str] = []
    executions = [0]
    release = threading.Event()
    poison = set(scenario.poison)

    def hook(name: str, event: TraceEvent) -> None:
        state = broker.queues[name]
        with lock:
            if event.kind == "enqueue":
                serial_of_tag[event.tag] = state.pending[-1].envelope.body["serial"]
            elif event.kind == "ack":
                serial = serial_of_tag[event.tag]
                acks[serial] = acks.get(serial, 0) + 1
            elif event.kind == "dead_letter":
                dead.add(serial_of_tag[event.tag])
            elif event.kind == "deliver" and event.redelivered:
                redelivered.add(serial_of_tag[event.tag])
            if not state.conservation_holds():
                violations.append(f"conservation broken after {event.kind} (seq {event.seq})")

    broker.add_trace_hook(hook)
    options = {"heartbeat_interval": scenario.heartbeat_interval * ms}
    submitter = connect("local://", broker=broker, **options)
    consumers: List[Communicator] = []
    closers: List[threading.Thread] = []
    submitted = 0
    started = time.monotonic()

    def make_handler(work_s: float, hang: bool):
        def handler(_comm, payload):
            with lock:
                executions[0] += 1
            if hang:
                release.wait()
            else:
                time.sleep(work_s)
            if payload["serial"] in poison:
                raise _PoisonTask(f"poison task {payload['serial']}")
            return payload["serial"]

        # Run each delivery on its own thread so prefetch > 1 means real concurrency.
        def dispatch(comm, payload):
            fut: concurrent.futures.Future = concurrent.futures.Future()

            def body():
                try:
                    fut.set_result(handler(comm, payload))
                except Exception as exc:  # pylint: disable=broad-except
                    fut.set_exception(exc)

            threading.Thread(target=body, daemon=True).start()
            return fut

        return dispatch

    try:
        for event in scenario.events:
            if event.at is not None:
                delay = started + event.at * ms - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
            kind = event.kind
            if kind is EventKind.SPAWN_CONSUMER:
                comm = connect("local://", broker=broker, **options)
                comm.add_task_subscriber(
                    make_handler(event.get("work") * ms, event.get("hang")), prefetch=event.get("prefetch")
                )
                consumers.append(comm)
            elif kind is EventKind.SUBMIT_TASKS:
                for _ in range(event.get("count")):
                    submitted += 1
                    submitter.task_send({"serial": submitted}, no_reply=True)
            elif kind is EventKind.KILL_CONSUMER:
                consumers[int(event.get("id")[1:]) - 1].transport.abort()
            elif kind is EventKind.GRACEFUL_CLOSE:
                comm = consumers[int(event.get("id")[1:]) - 1]
                closer = threading.Thread(target=comm.close, args=(event.get("grace") * ms,), daemon=True)
                closer.start()
                closers.append(closer)
            elif kind is EventKind.SILENCE_HEARTBEAT:
                consumers[int(event.get("id")[1:]) - 1].transport.suspend_heartbeats(event.get("duration") * ms)
            elif kind is EventKind.ADVANCE_TIME:
                time.sleep(event.get("duration") * ms)

        deadline = time.monotonic() + settle_timeout
        while time.monotonic() < deadline:
            with lock:
                settled = sum(1 for s in range(1, submitted + 1) if s in acks or s in dead)
            if settled == submitted:
                break
            time.sleep(0.01)
    finally:
        release.set()
        for closer in closers:
            closer.join(settle_timeout)
        for comm in consumers + [submitter]:
            comm.close(grace=0.5)

    with broker._critical:  # pylint: disable=protected-access
        state = broker.queue(queue_name)
        violations += state.check_invariants()
        pending = set(state.pending_tags())
        for held in state.unacked.values():
            pending.update(held)
    tag_of_serial = {serial: tag for tag, serial in serial_of_tag.items()}
    outcomes: Dict[int, TaskOutcome] = {}
    for serial in range(1, submitted + 1):
        count = acks.get(serial, 0)
        if count > 1:
            outcomes[serial] = TaskOutcome.DUPLICATED
        elif count == 1:
            outcomes[serial] = TaskOutcome.ACKED_ONCE
        elif serial in dead:
            outcomes[serial] = TaskOutcome.DEAD_LETTERED
        elif tag_of_serial.get(serial) in pending:
            outcomes[serial] = TaskOutcome.PENDING
        else:
            outcomes[serial] = TaskOutcome.LOST
    report = AuditReport(
        outcomes=outcomes,
        violations=violations,
        trace=[],
        redelivered=frozenset(redelivered),
        requeued=frozenset(),
        executions=executions[0],
        end_time=round((time.monotonic() - started) / ms),
        seed=scenario.seed,
    )
    if scenario.expected is not None:
        report.violations += scenario.expected.mismatches(report.counts, len(report.redelivered))
    return report
