"""Injectable clocks. All TTL and scheduling logic goes through one of these
so lifecycle timing is exactly testable."""

from __future__ import annotations

import time


class Clock:
    """Read-only time source. Subclasses define where 'now' comes from."""

    def now(self) -> float:
        raise NotImplementedError


class SystemClock(Clock):
    """Wall-clock seconds (epoch)."""

    def now(self) -> float:
        return time.time()


class ManualClock(Clock):
    """Virtual clock advanced explicitly by the test or simulation driver."""

    def __init__(self, start: float = 0.0):
        self._now = float(start)

    def now(self) -> float:
        return self._now

    def advance(self, delta: float) -> float:
        if delta < 0:
            raise ValueError("clock cannot move backwards")
        self._now += delta
        return self._now

    def advance_to(self, target: float) -> float:
        if target < self._now:
            raise ValueError("clock cannot move backwards")
        self._now = float(target)
        return self._now
