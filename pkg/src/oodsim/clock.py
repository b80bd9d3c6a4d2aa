"""Clock abstraction: wall time for live runs, virtual time for deterministic ones.

All pipeline timestamps are integer nanoseconds. Virtual mode is driven by a
single-threaded discrete-event scheduler; callbacks scheduled for the same
instant fire in scheduling order, which makes whole runs reproducible.
"""

from __future__ import annotations

import heapq
import time


class Clock:
    def now_ns(self) -> int:
        raise NotImplementedError


class WallClock(Clock):
    """Monotonic wall-clock time."""

    def __init__(self):
        self._t0 = time.monotonic_ns()

    def now_ns(self) -> int:
        return time.monotonic_ns() - self._t0

    def sleep_until(self, t_ns: int) -> None:
        delta = t_ns - self.now_ns()
        if delta > 0:
            time.sleep(delta / 1e9)


class VirtualClock(Clock):
    """Discrete-event virtual clock.

    Time only moves when the scheduler executes the next event. Ties are broken
    by insertion order, so identical schedules replay identically.
    """

    def __init__(self):
        self._now = 0
        self._heap = []  # (t_ns, tie, callback)
        self._tie = 0

    def now_ns(self) -> int:
        return self._now

    def schedule(self, t_ns: int, callback) -> None:
        if t_ns < self._now:
            raise ValueError(f"cannot schedule into the past: {t_ns} < {self._now}")
        heapq.heappush(self._heap, (int(t_ns), self._tie, callback))
        self._tie += 1

    def schedule_in(self, delta_ns: int, callback) -> None:
        self.schedule(self._now + int(delta_ns), callback)

    def pending(self) -> int:
        return len(self._heap)

    def run(self, until_ns: int | None = None) -> None:
        """Execute events in order until the heap drains (or past `until_ns`)."""
        while self._heap:
            t, _, cb = self._heap[0]
            if until_ns is not None and t > until_ns:
                break
            heapq.heappop(self._heap)
            self._now = t
            cb(t)


def s_to_ns(seconds: float) -> int:
    return round(seconds * 1e9)


def ns_to_s(ns: int) -> float:
    return ns / 1e9
