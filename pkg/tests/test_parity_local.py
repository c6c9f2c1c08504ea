"""The live-broker parity helpers, exercised against the in-process broker."""
import uuid

import pytest

from commkit import LocalBroker, connect

import parity


@pytest.fixture
def open_comm():
    broker = LocalBroker(f"parity-{uuid.uuid4().hex[:8]}")
    opened = []

    def factory(**options):
        comm = connect("local://", broker=broker, **options)
        opened.append(comm)
        return comm

    yield factory
    for comm in opened:
        if not comm.is_closed():
            comm.close(grace=0.2)


@pytest.mark.parametrize("seed", range(3))
def test_kill_run_reexecutes_only_in_flight_tasks(open_comm, seed):
    run = parity.kill_run(open_comm, 200, 3, 2, seed=seed)
    twice = {serial for serial, n in run["executions"].items() if n > 1}
    in_flight = set().union(*run["in_flight_at_kill"].values())
    assert run["results_ok"]
    assert len(run["executions"]) == 200
    assert twice <= in_flight
    assert len(run["in_flight_at_kill"]) == 2


def test_bulk_tasks_small(open_comm):
    run = parity.bulk_tasks(open_comm, 50, 3)
    assert run["results_ok"] and set(run["executions"].values()) == {1}


def test_broadcast_fanout_detects_a_wrong_oracle(open_comm, monkeypatch):
    # With a deliberately wrong oracle the helper must report mismatches.
    monkeypatch.setattr(parity, "reference_glob", lambda pattern, value: False)
    assert parity.broadcast_fanout(open_comm, 10, seed=1)
