"""Fault-injection scenarios and their JSON-lines form.

A scenario file is one header object, one object per event and, optionally,
a trailing ``{"expected": {...}}`` line::

    {"seed": 7, "heartbeat_interval": 50, "poison": []}
    {"kind": "SPAWN_CONSUMER", "at": 0, "prefetch": 2, "work": 10}
    {"kind": "SUBMIT_TASKS", "at": 0, "count": 100}
    {"kind": "KILL_CONSUMER", "at": 25, "id": "c1"}
    {"expected": {"ACKED_ONCE": 100}}

Times and durations are virtual milliseconds.  Consumers are named ``c1``,
``c2``... in spawn order.
"""
from __future__ import annotations

import enum
import json
import random
from dataclasses import dataclass, field
from typing import Any, Dict, IO, Iterable, List, Optional, Tuple, Union

from ..exceptions import ScenarioError

__all__ = (
    "EventKind",
    "Event",
    "ExpectedOutcome",
    "Scenario",
    "spawn",
    "submit",
    "kill",
    "graceful_close",
    "silence",
    "advance",
    "load_scenario",
    "dump_scenario",
    "random_scenario",
)


class EventKind(str, enum.Enum):
    SPAWN_CONSUMER = "SPAWN_CONSUMER"
    SUBMIT_TASKS = "SUBMIT_TASKS"
    KILL_CONSUMER = "KILL_CONSUMER"
    GRACEFUL_CLOSE = "GRACEFUL_CLOSE"
    SILENCE_HEARTBEAT = "SILENCE_HEARTBEAT"
    ADVANCE_TIME = "ADVANCE_TIME"


# Required and optional parameters per kind, with defaults for the optional ones.
_PARAMS: Dict[EventKind, Tuple[Tuple[str, ...], Dict[str, Any]]] = {
    EventKind.SPAWN_CONSUMER: ((), {"prefetch": 1, "work": 1, "hang": False}),
    EventKind.SUBMIT_TASKS: (("count",), {}),
    EventKind.KILL_CONSUMER: (("id",), {}),
    EventKind.GRACEFUL_CLOSE: (("id", "grace"), {}),
    EventKind.SILENCE_HEARTBEAT: (("id", "duration"), {}),
    EventKind.ADVANCE_TIME: (("duration",), {}),
}

Number = Union[int, float]


@dataclass(frozen=True)
class Event:
    kind: EventKind
    at: Optional[Number] = None
    params: Tuple[Tuple[str, Any], ...] = ()

    def __post_init__(self):
        if not isinstance(self.kind, EventKind):
            try:
                object.__setattr__(self, "kind", EventKind(self.kind))
            except ValueError:
                raise ScenarioError(f"unknown event kind {self.kind!r}") from None
        if isinstance(self.params, dict):
            object.__setattr__(self, "params", tuple(sorted(self.params.items())))

    def get(self, name: str) -> Any:
        for key, value in self.params:
            if key == name:
                return value
        required, optional = _PARAMS[self.kind]
        if name in optional:
            return optional[name]
        raise ScenarioError(f"{self.kind.value} event is missing {name!r}")

    def to_dict(self) -> dict:
        out: Dict[str, Any] = {"kind": self.kind.value}
        if self.at is not None:
            out["at"] = self.at
        out.update(self.params)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "Event":
        if not isinstance(obj, dict) or "kind" not in obj:
            raise ScenarioError(f"event must be an object with a 'kind': {obj!r}")
        rest = {k: v for k, v in obj.items() if k not in ("kind", "at")}
        return cls(obj["kind"], obj.get("at"), rest)


def spawn(prefetch: int = 1, work: Number = 1, hang: bool = False, at: Optional[Number] = None) -> Event:
    return Event(EventKind.SPAWN_CONSUMER, at, {"prefetch": prefetch, "work": work, "hang": hang})


def submit(count: int, at: Optional[Number] = None) -> Event:
    return Event(EventKind.SUBMIT_TASKS, at, {"count": count})


def kill(consumer: str, at: Optional[Number] = None) -> Event:
    return Event(EventKind.KILL_CONSUMER, at, {"id": consumer})


def graceful_close(consumer: str, grace: Number, at: Optional[Number] = None) -> Event:
    return Event(EventKind.GRACEFUL_CLOSE, at, {"id": consumer, "grace": grace})


def silence(consumer: str, duration: Number, at: Optional[Number] = None) -> Event:
    return Event(EventKind.SILENCE_HEARTBEAT, at, {"id": consumer, "duration": duration})


def advance(duration: Number, at: Optional[Number] = None) -> Event:
    return Event(EventKind.ADVANCE_TIME, at, {"duration": duration})


@dataclass(frozen=True)
class ExpectedOutcome:
    """Counts a run must reproduce; keys absent from ``counts`` are not checked."""

    counts: Tuple[Tuple[str, int], ...] = ()
    redelivered: Optional[int] = None

    @classmethod
    def from_dict(cls, obj: dict) -> "ExpectedOutcome":
        if not isinstance(obj, dict):
            raise ScenarioError("'expected' must be an object")
        obj = dict(obj)
        redelivered = obj.pop("redelivered", None)
        for key, value in obj.items():
            if not isinstance(value, int) or value < 0:
                raise ScenarioError(f"expected count for {key!r} must be a non-negative integer")
        return cls(tuple(sorted(obj.items())), redelivered)

    def to_dict(self) -> dict:
        out = dict(self.counts)
        if self.redelivered is not None:
            out["redelivered"] = self.redelivered
        return out

    def mismatches(self, counts: Dict[str, int], redelivered: int) -> List[str]:
        problems = [
            f"expected {want} {name}, got {counts.get(name, 0)}"
            for name, want in self.counts
            if counts.get(name, 0) != want
        ]
        if self.redelivered is not None and redelivered != self.redelivered:
            problems.append(f"expected {self.redelivered} redelivered, got {redelivered}")
        return problems


@dataclass(frozen=True)
class Scenario:
    seed: int = 0
    events: Tuple[Event, ...] = ()
    expected: Optional[ExpectedOutcome] = None
    heartbeat_interval: Number = 50
    poison: Tuple[int, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        object.__setattr__(self, "poison", tuple(self.poison))

    def validate(self) -> None:
        """Raise ScenarioError unless the script is well-formed."""
        if not (isinstance(self.heartbeat_interval, (int, float)) and self.heartbeat_interval > 0):
            raise ScenarioError("heartbeat_interval must be positive")
        spawned = 0
        last_at: Number = 0
        for index, event in enumerate(self.events):
            where = f"event {index} ({event.kind.value})"
            required, optional = _PARAMS[event.kind]
            names = {key for key, _ in event.params}
            unknown = names - set(required) - set(optional)
            if unknown:
                raise ScenarioError(f"{where}: unknown parameters {sorted(unknown)}")
            missing = set(required) - names
            if missing:
                raise ScenarioError(f"{where}: missing parameters {sorted(missing)}")
            if event.at is not None:
                if not isinstance(event.at, (int, float)) or event.at < last_at:
                    raise ScenarioError(f"{where}: logical time {event.at!r} goes backwards (last {last_at})")
                last_at = event.at
            if event.kind is EventKind.SPAWN_CONSUMER:
                _check_number(where, "prefetch", event.get("prefetch"), integer=True, minimum=1)
                _check_number(where, "work", event.get("work"))
                if not isinstance(event.get("hang"), bool):
                    raise ScenarioError(f"{where}: 'hang' must be a boolean")
                spawned += 1
            elif event.kind is EventKind.SUBMIT_TASKS:
                _check_number(where, "count", event.get("count"), integer=True)
            elif event.kind is EventKind.ADVANCE_TIME:
                _check_number(where, "duration", event.get("duration"))
            else:
                target = event.get("id")
                if not (isinstance(target, str) and target.startswith("c") and target[1:].isdigit()):
                    raise ScenarioError(f"{where}: bad consumer id {target!r}")
                if not 1 <= int(target[1:]) <= spawned:
                    raise ScenarioError(f"{where}: consumer {target} has not been spawned yet")
                for name in ("grace", "duration"):
                    if name in names:
                        _check_number(where, name, event.get(name))

    @property
    def task_count(self) -> int:
        return sum(e.get("count") for e in self.events if e.kind is EventKind.SUBMIT_TASKS)

    def header(self) -> dict:
        return {"seed": self.seed, "heartbeat_interval": self.heartbeat_interval, "poison": list(self.poison)}

    def to_lines(self) -> List[str]:
        lines = [json.dumps(self.header(), sort_keys=True)]
        lines += [json.dumps(e.to_dict(), sort_keys=True) for e in self.events]
        if self.expected is not None:
            lines.append(json.dumps({"expected": self.expected.to_dict()}, sort_keys=True))
        return lines

    def to_dict(self) -> dict:
        out = self.header()
        out["events"] = [e.to_dict() for e in self.events]
        if self.expected is not None:
            out["expected"] = self.expected.to_dict()
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "Scenario":
        try:
            events = tuple(Event.from_dict(e) for e in obj.get("events", ()))
            expected = obj.get("expected")
            return cls(
                seed=obj.get("seed", 0),
                events=events,
                expected=None if expected is None else ExpectedOutcome.from_dict(expected),
                heartbeat_interval=obj.get("heartbeat_interval", 50),
                poison=tuple(obj.get("poison", ())),
            )
        except (TypeError, AttributeError) as exc:
            raise ScenarioError(f"malformed scenario: {exc}") from exc


def _check_number(where: str, name: str, value: Any, integer: bool = False, minimum: Number = 0) -> None:
    kinds = (int,) if integer else (int, float)
    if isinstance(value, bool) or not isinstance(value, kinds) or value < minimum:
        kind = "an integer" if integer else "a number"
        raise ScenarioError(f"{where}: {name!r} must be {kind} >= {minimum}, got {value!r}")


def _parse_lines(lines: Iterable[str]) -> List[dict]:
    objs = []
    for number, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        try:
            objs.append(json.loads(line))
        except ValueError as exc:
            raise ScenarioError(f"line {number}: not JSON ({exc})") from exc
    return objs


def load_scenario(source: Union[str, IO[str], Iterable[str]]) -> Scenario:
    """Read a scenario from a path, an open file or an iterable of lines."""
    if isinstance(source, str):
        with open(source, encoding="utf-8") as handle:
            return load_scenario(handle)
    objs = _parse_lines(source)
    if not objs or not isinstance(objs[0], dict) or "kind" in objs[0]:
        raise ScenarioError("scenario must start with a header object")
    header, body = objs[0], objs[1:]
    expected = None
    if body and isinstance(body[-1], dict) and set(body[-1]) == {"expected"}:
        expected = body.pop()["expected"]
    scenario = Scenario.from_dict(dict(header, events=body, expected=expected))
    scenario.validate()
    return scenario


def dump_scenario(scenario: Scenario, target: Union[str, IO[str]]) -> None:
    text = "\n".join(scenario.to_lines()) + "\n"
    if isinstance(target, str):
        with open(target, "w", encoding="utf-8") as handle:
            handle.write(text)
    else:
        target.write(text)


def random_scenario(seed: int, size: int = 12, heartbeat_interval: int = 50) -> Scenario:
    """A reproducible adversarial schedule of ``size`` events.

    Consumer ``c1`` is an anchor that is never killed, closed or silenced, so
    every submitted task can eventually complete; any hanging consumer still
    running at the end is killed.  The scenario therefore expects every task
    to be ACKED_ONCE.
    """
    if size < 0:
        raise ValueError("size must be non-negative")
    if size == 0:
        return Scenario(seed=seed, heartbeat_interval=heartbeat_interval, expected=ExpectedOutcome())
    rng = random.Random(seed)
    interval = heartbeat_interval
    events: List[Event] = [spawn(prefetch=rng.randint(1, 3), work=rng.randint(1, 20), at=0)]
    now = 0
    live: List[str] = []
    hanging: set = set()
    spawned = 1
    tasks = 0
    for _ in range(size - 1):
        now += rng.choice((0, 0, 1, 5, 10, 25))
        roll = rng.random()
        if roll < 0.2 or (not live and roll < 0.45):
            spawned += 1
            hang = rng.random() < 0.2
            events.append(spawn(rng.randint(1, 4), rng.randint(1, 30), hang, at=now))
            live.append(f"c{spawned}")
            if hang:
                hanging.add(f"c{spawned}")
        elif roll < 0.45:
            count = rng.randint(1, 8)
            tasks += count
            events.append(submit(count, at=now))
        elif roll < 0.6 and live:
            target = live.pop(rng.randrange(len(live)))
            hanging.discard(target)
            events.append(kill(target, at=now))
        elif roll < 0.7 and live:
            target = live.pop(rng.randrange(len(live)))
            hanging.discard(target)
            events.append(graceful_close(target, rng.choice((0, 5, 20, 60)), at=now))
        elif roll < 0.85 and live:
            target = rng.choice(live)
            duration = rng.choice((interval, 2 * interval - 1, 2 * interval, 3 * interval))
            events.append(silence(target, duration, at=now))
        else:
            step = rng.choice((1, 10, interval, 2 * interval))
            events.append(advance(step, at=now))
            now += step
    for target in sorted(hanging, key=lambda c: int(c[1:])):
        events.append(kill(target, at=now))
    return Scenario(
        seed=seed,
        events=tuple(events),
        expected=ExpectedOutcome((("ACKED_ONCE", tasks),)),
        heartbeat_interval=heartbeat_interval,
    )
