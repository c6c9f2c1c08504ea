"""Scripted fault injection over the in-process broker, with a delivery audit."""
from .runner import AuditReport, TaskOutcome, read_trace, replay_trace, run_scenario, write_trace
from .scenario import (
    Event,
    EventKind,
    ExpectedOutcome,
    Scenario,
    advance,
    dump_scenario,
    graceful_close,
    kill,
    load_scenario,
    random_scenario,
    silence,
    spawn,
    submit,
)

__all__ = (
    "AuditReport",
    "TaskOutcome",
    "run_scenario",
    "replay_trace",
    "read_trace",
    "write_trace",
    "Event",
    "EventKind",
    "ExpectedOutcome",
    "Scenario",
    "random_scenario",
    "load_scenario",
    "dump_scenario",
    "spawn",
    "submit",
    "kill",
    "graceful_close",
    "silence",
    "advance",
)
