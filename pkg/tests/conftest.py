import itertools
import os
import time

import pytest

from commkit import LocalBroker, connect

_names = itertools.count(1)

AMQP_URI = os.environ.get("COMMKIT_TEST_AMQP_URI")


def wait_for(predicate, timeout=5.0, interval=0.002):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return predicate()


@pytest.fixture
def broker():
    return LocalBroker(f"test-{next(_names)}")


@pytest.fixture
def make_comm(broker):
    """Factory for communicators on the test's private broker; all are closed at teardown."""
    opened = []

    def factory(**options):
        comm = connect("local://", broker=broker, **options)
        opened.append(comm)
        return comm

    yield factory
    for comm in opened:
        comm.close(grace=0.2)


# region Acceptance reporting

_ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """``criterion(n, title, ok, detail)`` records and prints one PASS/FAIL line, returning ``ok``."""

    def record(number, title, ok, detail=""):
        status = "PASS" if ok else "FAIL"
        if ok is None:
            status = "SKIP"
        line = f"criterion {number:>2} {status}  {title}" + (f"  [{detail}]" if detail else "")
        _ACCEPTANCE[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])


# endregion
