"""Heartbeat liveness bookkeeping and the reconnect backoff policy."""
from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field
from typing import Iterator, Optional

__all__ = ("Liveness", "LivenessState", "record_activity", "check_liveness", "Backoff")

MISSED_BEATS_FOR_DEATH = 2


class Liveness(enum.Enum):
    ALIVE = "ALIVE"
    DEAD = "DEAD"


@dataclass
class LivenessState:
    heartbeat_interval: float = 60.0
    last_peer_activity: float = 0.0
    status: Liveness = Liveness.ALIVE

    def record_activity(self, now: float) -> None:
        if self.status is Liveness.DEAD:
            return
        self.last_peer_activity = max(self.last_peer_activity, now)

    def check(self, now: float) -> Liveness:
        # Once dead, stays dead: new activity is ignored above.
        if now - self.last_peer_activity >= MISSED_BEATS_FOR_DEATH * self.heartbeat_interval:
            self.status = Liveness.DEAD
        return self.status


def record_activity(state: LivenessState, now: float) -> None:
    state.record_activity(now)


def check_liveness(state: LivenessState, now: float) -> Liveness:
    return state.check(now)


@dataclass
class Backoff:
    """Exponential reconnect delays: ``initial * factor**n`` capped, with +/- jitter.

    >>> list(Backoff(jitter=0.0, max_attempts=7).delays())
    [1.0, 2.0, 4.0, 8.0, 16.0, 30.0, 30.0]
    """

    initial: float = 1.0
    factor: float = 2.0
    cap: float = 30.0
    jitter: float = 0.2
    max_attempts: Optional[int] = None
    seed: Optional[int] = None
    _rng: random.Random = field(init=False, repr=False)

    def __post_init__(self):
        self._rng = random.Random(self.seed)

    def base_delay(self, attempt: int) -> float:
        try:
            return float(min(self.cap, self.initial * self.factor ** attempt))
        except OverflowError:
            return float(self.cap)

    def delay(self, attempt: int) -> float:
        base = self.base_delay(attempt)
        if not self.jitter:
            return base
        return base * (1.0 + self._rng.uniform(-self.jitter, self.jitter))

    def delays(self) -> Iterator[float]:
        attempt = 0
        while self.max_attempts is None or attempt < self.max_attempts:
            yield self.delay(attempt)
            attempt += 1
