"""Workflow-engine style demo: workers running processes that can be steered remotely.

A task payload describes a process::

    {"serial": 3, "steps": [200, 200, 500], "pid": "optional-id"}

The worker turns each task into a :class:`DemoProcess`, registers an RPC
subscriber under its pid (``pause`` / ``play`` / ``kill`` / ``status``), runs
its steps (milliseconds each) on a thread pool and, when it ends, broadcasts
``state_changed.<pid>.finished`` or ``state_changed.<pid>.killed``.
Broadcasts with subject ``pause``, ``play`` or ``kill`` address every process
on every worker at once.

The command-line front end is ``commkit-demo worker|submit|ctl|parent-wait``.
"""
from __future__ import annotations

import argparse
import collections
import concurrent.futures
import enum
import itertools
import json
import logging
import os
import secrets
import signal
import sys
import threading
import time
from typing import Any, Deque, Dict, List, Optional, Tuple

from .communicator import Communicator, connect
from .envelope import BroadcastFilter
from .exceptions import CommkitError, MessageFailed, UriError
from .futures import Future

__all__ = (
    "ProcessState",
    "DemoProcess",
    "Worker",
    "make_payload",
    "submit",
    "ctl",
    "parent_wait",
    "main",
)

_LOGGER = logging.getLogger(__name__)

ACTIONS = ("pause", "play", "kill")


class ProcessState(str, enum.Enum):
    CREATED = "CREATED"
    RUNNING = "RUNNING"
    PAUSED = "PAUSED"
    KILLED = "KILLED"
    FINISHED = "FINISHED"

    @property
    def terminal(self) -> bool:
        return self in (ProcessState.KILLED, ProcessState.FINISHED)


_LEGAL = {
    ProcessState.CREATED: {ProcessState.RUNNING},
    ProcessState.RUNNING: {ProcessState.PAUSED, ProcessState.KILLED, ProcessState.FINISHED},
    ProcessState.PAUSED: {ProcessState.RUNNING, ProcessState.KILLED},
    ProcessState.KILLED: set(),
    ProcessState.FINISHED: set(),
}


def termination_subject(pid: str, state: ProcessState) -> str:
    return f"state_changed.{pid}.{state.value.lower()}"


def make_payload(serial: int, steps: List[float], pid: Optional[str] = None) -> dict:
    return {"serial": serial, "steps": list(steps), "pid": pid or f"proc-{serial}-{secrets.token_hex(4)}"}


def _parse_payload(payload: Any) -> Tuple[int, List[float], Optional[str]]:
    if not isinstance(payload, dict):
        raise ValueError("payload must be an object")
    serial = payload.get("serial", 0)
    steps = payload.get("steps", [])
    pid = payload.get("pid")
    if isinstance(serial, bool) or not isinstance(serial, int):
        raise ValueError("'serial' must be an integer")
    if not isinstance(steps, list) or not all(
        isinstance(s, (int, float)) and not isinstance(s, bool) and s >= 0 for s in steps
    ):
        raise ValueError("'steps' must be a list of non-negative durations in milliseconds")
    if pid is not None and (not isinstance(pid, str) or not pid):
        raise ValueError("'pid' must be a non-empty string")
    return serial, steps, pid


class DemoProcess:
    """A process made of timed steps; pause lands between steps, kill lands at once.

    Control requests go through an ordered command queue that the process's
    own thread drains at step boundaries.
    """

    def __init__(self, pid: str, steps: List[float], serial: int = 0, on_terminate=None):
        self.pid = pid
        self.serial = serial
        self.steps = list(steps)
        self.steps_done = 0
        self._state = ProcessState.CREATED
        self._cond = threading.Condition()
        self._commands: Deque[Tuple[str, Future]] = collections.deque()
        self._kill_requested = False
        self._abandoned = False
        self._kill_replies: List[Future] = []
        self._on_terminate = on_terminate
        self.done = Future()

    def __repr__(self) -> str:
        return f"<DemoProcess {self.pid} {self._state.value} {self.steps_done}/{len(self.steps)}>"

    @property
    def state(self) -> ProcessState:
        return self._state

    def _transition(self, new: ProcessState) -> None:
        if new not in _LEGAL[self._state]:
            raise RuntimeError(f"illegal transition {self._state.value} -> {new.value} for {self.pid}")
        self._state = new

    # region Control

    def command(self, action: str) -> Future:
        """Queue ``action``; the returned future resolves with the process's answer."""
        reply = Future()
        with self._cond:
            if action == "status":
                reply.set_result(self._state.value.lower())
            elif self._state.terminal:
                reply.set_result(f"already {self._state.value.lower()}")
            elif action == "kill":
                self._kill_requested = True
                self._kill_replies.append(reply)
                self._cond.notify_all()
            elif action in ("pause", "play"):
                self._commands.append((action, reply))
                self._cond.notify_all()
            else:
                reply.set_error(ValueError(f"unknown action {action!r}"))
        return reply

    def abandon(self) -> None:
        """Stop without reporting anything, as if the hosting worker died."""
        with self._cond:
            self._abandoned = True
            self._cond.notify_all()

    def _apply_commands(self) -> None:
        while self._commands:
            action, reply = self._commands.popleft()
            if action == "pause":
                if self._state is ProcessState.PAUSED:
                    reply.set_result("already paused")
                else:
                    self._transition(ProcessState.PAUSED)
                    reply.set_result("paused")
            else:
                if self._state is ProcessState.RUNNING:
                    reply.set_result("already running")
                else:
                    self._transition(ProcessState.RUNNING)
                    reply.set_result("playing")

    def _checkpoint(self) -> bool:
        """Apply queued commands, sit out a pause; False once killed or abandoned."""
        with self._cond:
            while True:
                if self._abandoned or self._kill_requested:
                    return False
                self._apply_commands()
                if self._state is not ProcessState.PAUSED:
                    return True
                self._cond.wait()

    # endregion

    def run(self) -> Optional[ProcessState]:
        """Execute every step; returns the terminal state, or None if abandoned."""
        with self._cond:
            self._transition(ProcessState.RUNNING)
        for duration in self.steps:
            if not self._checkpoint():
                break
            deadline = time.monotonic() + duration / 1000.0
            with self._cond:
                while not (self._kill_requested or self._abandoned):
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        break
                    self._cond.wait(remaining)
                if self._kill_requested or self._abandoned:
                    break
            self.steps_done += 1
        else:
            self._checkpoint()
        with self._cond:
            if self._abandoned:
                return None
            final = ProcessState.KILLED if self._kill_requested else ProcessState.FINISHED
            self._transition(final)
            for action, reply in self._commands:
                reply.set_result(f"already {final.value.lower()}")
            self._commands.clear()
            kill_replies, self._kill_replies = self._kill_replies, []
        for reply in kill_replies:
            reply.set_result("killed")
        if self._on_terminate is not None:
            self._on_terminate(self)
        self.done.set_result(final)
        return final


class Worker:
    """Consumes process tasks and steers them through RPC and broadcast control."""

    def __init__(
        self,
        uri: Optional[str] = None,
        *,
        communicator: Optional[Communicator] = None,
        queue: Optional[str] = None,
        concurrency: int = 4,
        broker=None,
        **options,
    ):
        if concurrency < 1:
            raise ValueError("concurrency must be at least 1")
        if communicator is None:
            if uri is None:
                raise UriError("a URI or a communicator is required")
            communicator = connect(uri, broker=broker, task_queue=queue, **options)
        self.comm = communicator
        self.concurrency = concurrency
        self._pool = concurrent.futures.ThreadPoolExecutor(concurrency, thread_name_prefix="demo-step")
        self._lock = threading.Lock()
        self.processes: Dict[str, DemoProcess] = {}
        self.history: List[Tuple[str, int, str]] = []
        self._dead = False
        self._tokens = []
        self._anon = itertools.count(1)

    def start(self) -> "Worker":
        self._tokens.append(self.comm.add_task_subscriber(self._on_task, prefetch=self.concurrency))
        for action in ACTIONS:
            self._tokens.append(
                self.comm.add_broadcast_subscriber(self._on_control_broadcast, BroadcastFilter("*", action))
            )
        return self

    def __enter__(self) -> "Worker":
        return self.start()

    def __exit__(self, *exc_info) -> None:
        self.stop()

    def live(self) -> List[DemoProcess]:
        with self._lock:
            return list(self.processes.values())

    def _on_task(self, comm: Communicator, payload) -> Future:
        serial, steps, pid = _parse_payload(payload)
        if pid is None:
            pid = f"proc-{serial}-{next(self._anon)}-{secrets.token_hex(3)}"
        proc = DemoProcess(pid, steps, serial, on_terminate=self._terminated)
        with self._lock:
            self.processes[pid] = proc
        comm.add_rpc_subscriber(lambda _c, action: self._on_rpc(proc, action), pid)
        result = Future()

        def run():
            try:
                final = proc.run()
            except Exception as exc:  # pylint: disable=broad-except
                _LOGGER.exception("process %s crashed", pid)
                result.set_error(exc)
                return
            if final is not None:
                result.set_result({"pid": pid, "serial": serial, "state": final.value})

        self._pool.submit(run)
        return result

    def _on_rpc(self, proc: DemoProcess, action):
        if not isinstance(action, str):
            raise ValueError("action must be a string")
        return proc.command(action)

    def _on_control_broadcast(self, _comm, _body, _sender, subject, _correlation_id) -> None:
        for proc in self.live():
            proc.command(subject)

    def _terminated(self, proc: DemoProcess) -> None:
        with self._lock:
            self.processes.pop(proc.pid, None)
            if self._dead:
                return
            self.history.append((proc.pid, proc.serial, proc.state.value))
        try:
            self.comm.remove_rpc_subscriber(proc.pid)
        except CommkitError:
            pass
        body = {"pid": proc.pid, "serial": proc.serial, "state": proc.state.value}
        try:
            self.comm.broadcast_send(body, sender=proc.pid, subject=termination_subject(proc.pid, proc.state))
        except CommkitError as exc:
            _LOGGER.warning("could not announce end of %s: %s", proc.pid, exc)

    def kill(self) -> None:
        """Die abruptly: the broker takes back unfinished tasks, nothing is announced."""
        with self._lock:
            self._dead = True
            procs = list(self.processes.values())
        self.comm.transport.abort()
        for proc in procs:
            proc.abandon()
        self._pool.shutdown(wait=False)
        self.comm.close(grace=0)

    def stop(self, grace: float = 5.0) -> None:
        """Stop taking work, let running processes finish within ``grace``, then disconnect."""
        if self._dead:
            return
        self.comm.close(grace=grace)
        with self._lock:
            self._dead = True
            procs = list(self.processes.values())
        for proc in procs:
            proc.abandon()
        self._pool.shutdown(wait=True)


# region Client-side helpers


def submit(
    comm: Communicator,
    payloads: List[dict],
    no_reply: bool = False,
    timeout: Optional[float] = None,
    out=None,
) -> int:
    """Send every payload, print results as they arrive; returns a process exit code."""
    out = out or sys.stdout
    futures = [comm.task_send(p, no_reply=no_reply) for p in payloads]
    if no_reply:
        print(f"submitted {len(futures)} task(s)", file=out)
        return 0
    done = threading.Event()
    remaining = [len(futures)]
    failures = [0]
    lock = threading.Lock()

    def report(fut: Future) -> None:
        with lock:
            exc = fut.exception(0) if not fut.cancelled() else CommkitError("cancelled")
            if exc is None:
                print(json.dumps(fut.result(0), sort_keys=True), file=out, flush=True)
            else:
                failures[0] += 1
                category = getattr(getattr(exc, "info", None), "category", None)
                label = category.value if category is not None else type(exc).__name__
                print(f"FAILED {label}: {exc}", file=out, flush=True)
            remaining[0] -= 1
            if remaining[0] == 0:
                done.set()

    if not futures:
        return 0
    for fut in futures:
        fut.add_done_callback(report)
    if not done.wait(timeout):
        print(f"TIMEOUT: {remaining[0]} task(s) unresolved after {timeout} s", file=out)
        return 1
    return 1 if failures[0] else 0


def ctl(
    comm: Communicator,
    action: str,
    target: Optional[str] = None,
    all_processes: bool = False,
    timeout: Optional[float] = None,
    out=None,
) -> int:
    out = out or sys.stdout
    if action not in ACTIONS + ("status",):
        raise ValueError(f"unknown action {action!r}")
    if all_processes:
        if action == "status":
            raise ValueError("status needs a pid")
        comm.broadcast_send(None, sender="ctl", subject=action)
        print("broadcast sent", file=out)
        return 0
    if not target:
        raise ValueError("a pid or --all is required")
    try:
        answer = comm.rpc_send(target, action, timeout=timeout).result()
    except MessageFailed as exc:
        print(exc.info.category.value, file=out)
        return 1
    print(answer, file=out)
    return 0


def parent_wait(
    comm: Communicator,
    child: dict,
    timeout: Optional[float] = None,
    out=None,
    on_subscribed=None,
) -> int:
    """Submit ``child`` and block until it announces its end: 0 if it finished, 2 if killed."""
    out = out or sys.stdout
    child = dict(child)
    child.setdefault("pid", make_payload(child.get("serial", 0), [])["pid"])
    pid = child["pid"]
    outcome: "concurrent.futures.Future[str]" = concurrent.futures.Future()

    def on_end(_comm, body, _sender, subject, _cid):
        if not outcome.done():
            outcome.set_result(subject.rsplit(".", 1)[-1])

    # Subscribe before submitting so the child's announcement cannot be missed.
    token = comm.add_broadcast_subscriber(on_end, BroadcastFilter("*", f"state_changed.{pid}.*"))
    try:
        if on_subscribed is not None:
            on_subscribed(pid)
        comm.task_send(child, no_reply=True)
        print(f"waiting for {pid}", file=out, flush=True)
        try:
            state = outcome.result(timeout)
        except concurrent.futures.TimeoutError:
            print(f"TIMEOUT waiting for {pid}", file=out)
            return 1
    finally:
        try:
            comm.remove_broadcast_subscriber(token)
        except CommkitError:
            pass
    print(f"child {pid} {state}", file=out)
    return 0 if state == "finished" else 2


# endregion

# region Command line


def _uri(args) -> str:
    uri = args.uri or os.environ.get("COMMKIT_URI")
    if not uri:
        raise UriError("no broker URI: pass --uri or set COMMKIT_URI")
    return uri


def _payload_arg(text: Optional[str]) -> dict:
    if text is None:
        return {"steps": [100]}
    if text.startswith("@"):
        with open(text[1:], encoding="utf-8") as handle:
            text = handle.read()
    obj = json.loads(text)
    if not isinstance(obj, dict):
        raise ValueError("payload must be a JSON object")
    _parse_payload(obj)
    return obj


def _cmd_worker(args) -> int:
    worker = Worker(_uri(args), queue=args.queue, concurrency=args.concurrency).start()
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    print(f"worker consuming (concurrency {args.concurrency}); Ctrl-C to stop", flush=True)
    stop.wait()
    worker.stop()
    return 0


def _cmd_submit(args) -> int:
    base = _payload_arg(args.payload)
    first = base.get("serial", 1)
    payloads = []
    for i in range(args.count):
        payload = dict(base, serial=first + i)
        if "pid" not in base or args.count > 1:
            payload["pid"] = make_payload(first + i, [])["pid"]
        payloads.append(payload)
    with connect(_uri(args), task_queue=args.queue) as comm:
        return submit(comm, payloads, no_reply=args.no_reply, timeout=args.timeout)


def _cmd_ctl(args) -> int:
    with connect(_uri(args), task_queue=args.queue) as comm:
        return ctl(comm, args.action, args.pid, args.all, args.timeout)


def _cmd_parent_wait(args) -> int:
    with connect(_uri(args), task_queue=args.queue) as comm:
        return parent_wait(comm, _payload_arg(args.payload), args.timeout)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="commkit-demo", description="Workflow-engine demo over commkit.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--uri", help="broker URI (default: $COMMKIT_URI)")
    common.add_argument("--queue", help="task queue name under the namespace")
    common.add_argument("--timeout", type=float, help="seconds to wait for answers")
    sub = parser.add_subparsers(dest="command", required=True)

    worker = sub.add_parser("worker", parents=[common], help="consume and run processes")
    worker.add_argument("--concurrency", type=int, default=4)
    worker.set_defaults(func=_cmd_worker)

    sub_p = sub.add_parser("submit", parents=[common], help="submit process tasks")
    sub_p.add_argument("payload", nargs="?", help='JSON like {"steps":[10]} or @file.json')
    sub_p.add_argument("--count", type=int, default=1)
    sub_p.add_argument("--no-reply", action="store_true", help="do not wait for results")
    sub_p.set_defaults(func=_cmd_submit)

    ctl_p = sub.add_parser("ctl", parents=[common], help="pause, play or kill processes")
    ctl_p.add_argument("action", choices=ACTIONS + ("status",))
    ctl_p.add_argument("pid", nargs="?")
    ctl_p.add_argument("--all", action="store_true", help="broadcast to every process")
    ctl_p.set_defaults(func=_cmd_ctl)

    wait_p = sub.add_parser("parent-wait", parents=[common], help="submit a child and wait for it")
    wait_p.add_argument("payload", nargs="?", help="child payload JSON or @file.json")
    wait_p.set_defaults(func=_cmd_parent_wait)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "command", None) == "ctl" and not args.all and not args.pid:
        build_parser().error("ctl needs a pid or --all")
    try:
        return args.func(args)
    except (CommkitError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

# endregion
