import pytest

from commkit.liveness import Backoff, Liveness, LivenessState, check_liveness, record_activity


@pytest.mark.parametrize("silence,expected", [(99, Liveness.ALIVE), (100, Liveness.DEAD), (150, Liveness.DEAD)])
def test_two_missed_intervals(silence, expected):
    state = LivenessState(heartbeat_interval=50, last_peer_activity=0)
    assert check_liveness(state, silence) is expected


def test_activity_resets_window():
    state = LivenessState(heartbeat_interval=50, last_peer_activity=0)
    record_activity(state, 75)
    assert check_liveness(state, 149) is Liveness.ALIVE
    assert check_liveness(state, 175) is Liveness.DEAD


def test_float_seconds():
    # Binary-exact values; the harness uses integer milliseconds for the same reason.
    state = LivenessState(heartbeat_interval=0.5, last_peer_activity=1.0)
    assert state.check(1.999) is Liveness.ALIVE
    assert state.check(2.0) is Liveness.DEAD


def test_monotone_once_dead():
    state = LivenessState(heartbeat_interval=50, last_peer_activity=0)
    assert state.check(100) is Liveness.DEAD
    state.record_activity(120)
    assert state.check(121) is Liveness.DEAD
    assert state.check(10_000) is Liveness.DEAD


def test_out_of_order_activity_does_not_rewind():
    state = LivenessState(heartbeat_interval=50, last_peer_activity=0)
    state.record_activity(80)
    state.record_activity(10)
    assert state.check(179) is Liveness.ALIVE


def test_backoff_without_jitter():
    assert list(Backoff(jitter=0, max_attempts=8).delays()) == [1, 2, 4, 8, 16, 30, 30, 30]


def test_backoff_jitter_bounds_and_seed():
    a = list(Backoff(seed=7, max_attempts=12).delays())
    b = list(Backoff(seed=7, max_attempts=12).delays())
    assert a == b
    base = list(Backoff(jitter=0, max_attempts=12).delays())
    for got, nominal in zip(a, base):
        assert 0.8 * nominal <= got <= 1.2 * nominal


def test_backoff_unlimited_and_huge_attempts():
    policy = Backoff(jitter=0)
    gen = policy.delays()
    assert [next(gen) for _ in range(50)][-1] == 30
    assert policy.base_delay(10_000) == 30
