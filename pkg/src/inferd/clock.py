"""Injectable clocks.

The kernel never reads time directly; it asks its clock. A VirtualClock is
advanced explicitly by the event loop, which makes scheduler runs and bench
reports reproducible to the byte. The WallClock wraps the monotonic clock for
real serving.
"""
from __future__ import annotations

import time


class Clock:
    virtual = False

    def now(self) -> float:
        raise NotImplementedError


class VirtualClock(Clock):
    """Manually advanced clock, in seconds of simulated time."""

    virtual = True

    def __init__(self, start: float = 0.0):
        self._now = float(start)

    def now(self) -> float:
        return self._now

    def advance_to(self, t: float) -> None:
        if t < self._now:
            raise ValueError("virtual time cannot move backwards")
        self._now = t


class WallClock(Clock):
    def now(self) -> float:
        return time.monotonic()
