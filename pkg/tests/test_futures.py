import threading
import time

import pytest

from commkit import AlreadyResolved, CancelledError, Future, FutureState, MessageFailed, RemoteException
from commkit.exceptions import ErrorCategory, ErrorInfo


def test_set_then_await():
    fut = Future()
    fut.set_result(5)
    assert fut.result() == 5
    assert fut.state is FutureState.RESOLVED


def test_single_assignment():
    fut = Future()
    fut.set_result(1)
    with pytest.raises(AlreadyResolved):
        fut.set_result(2)
    with pytest.raises(AlreadyResolved):
        fut.set_error(ErrorInfo(ErrorCategory.TIMEOUT))
    assert not fut.cancel()
    assert fut.result() == 1


def test_await_timeout():
    fut = Future()
    started = time.monotonic()
    with pytest.raises(TimeoutError):
        fut.result(timeout=0.01)
    assert time.monotonic() - started >= 0.01
    assert fut.state is FutureState.PENDING


def test_error_surfaces_category():
    fut = Future()
    fut.set_error(ErrorInfo(ErrorCategory.REMOTE_EXCEPTION, "bad"))
    with pytest.raises(RemoteException) as info:
        fut.result()
    assert isinstance(info.value, MessageFailed)
    assert info.value.info.category is ErrorCategory.REMOTE_EXCEPTION
    assert "bad" in str(info.value)
    assert isinstance(fut.exception(), RemoteException)


def test_set_error_from_exception():
    fut = Future()
    fut.set_error(ValueError("boom"))
    assert fut.error.category is ErrorCategory.REMOTE_EXCEPTION
    assert "ValueError: boom" in fut.error.message


def test_cancel():
    fut = Future()
    assert fut.cancel()
    assert fut.cancelled()
    with pytest.raises(CancelledError):
        fut.result()
    with pytest.raises(AlreadyResolved):
        fut.set_result(3)


def test_callbacks_run_once_and_late_callbacks_run_immediately():
    fut = Future()
    seen = []
    fut.add_done_callback(lambda f: seen.append(("early", f.result())))
    fut.set_result("v")
    fut.add_done_callback(lambda f: seen.append(("late", f.result())))
    assert seen == [("early", "v"), ("late", "v")]


def test_callback_errors_do_not_break_resolution():
    fut = Future()
    fut.add_done_callback(lambda f: 1 / 0)
    fut.set_result(1)
    assert fut.result() == 1


@pytest.mark.parametrize("round_", range(20))
def test_racing_resolvers_and_awaiters(round_):
    fut = Future()
    winners = []
    observed = []
    barrier = threading.Barrier(16)

    def resolver(i):
        barrier.wait()
        try:
            if i % 3 == 0:
                fut.set_error(ErrorInfo(ErrorCategory.TIMEOUT, str(i)))
            elif i % 3 == 1:
                fut.set_result(i)
            else:
                if not fut.cancel():
                    raise AlreadyResolved()
            winners.append(i)
        except AlreadyResolved:
            pass

    def awaiter():
        barrier.wait()
        fut.wait(5)
        observed.append((fut.state, fut._value, fut.error))  # pylint: disable=protected-access

    threads = [threading.Thread(target=resolver, args=(i,)) for i in range(8)]
    threads += [threading.Thread(target=awaiter) for _ in range(8)]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()
    assert len(winners) == 1
    assert len(set(map(repr, observed))) == 1
    assert observed[0][0] is not FutureState.PENDING
