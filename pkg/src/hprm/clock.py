"""Physical clocks.

The runtime compares physical time against tag timestamps when deciding
whether an event is safe to process, so every component must read the same
clock.  ``MonotonicClock`` wraps ``time.monotonic_ns``, which on Linux is
CLOCK_MONOTONIC: system-wide, so readings are comparable across processes
on one host.  ``ManualClock`` is for tests that need to stop time.
"""

from __future__ import annotations

import time
from typing import Protocol, runtime_checkable


@runtime_checkable
class Clock(Protocol):
    def now_ns(self) -> int: ...


class MonotonicClock:
    """System-wide monotonic clock, nanosecond resolution."""

    __slots__ = ()

    def now_ns(self) -> int:
        return time.monotonic_ns()


class ManualClock:
    """A clock that only moves when told to."""

    __slots__ = ("_now",)

    def __init__(self, start_ns: int = 0) -> None:
        self._now = start_ns

    def now_ns(self) -> int:
        return self._now

    def advance(self, delta_ns: int) -> int:
        if delta_ns < 0:
            raise ValueError("clocks do not run backwards")
        self._now += delta_ns
        return self._now

    def set(self, now_ns: int) -> None:
        if now_ns < self._now:
            raise ValueError("clocks do not run backwards")
        self._now = now_ns
