"""Virtual time for the simulator.

A single thread owns the clock and executes scheduled callbacks in
timestamp order; ties break in scheduling order, so a run is a pure
function of the callbacks scheduled.  Nothing here ever reads wall
time.
"""

from __future__ import annotations

import heapq
from typing import Callable


class Timer:
    __slots__ = ("fn", "canceled")

    def __init__(self, fn: Callable[[], None]) -> None:
        self.fn = fn
        self.canceled = False

    def cancel(self) -> None:
        self.canceled = True


class SimClock:
    def __init__(self, start_ms: int = 0) -> None:
        self._now_ms = start_ms
        self._seq = 0
        self._heap: list[tuple[int, int, Timer]] = []

    def now_ms(self) -> int:
        return self._now_ms

    def now(self) -> float:
        """Seconds, for components that expect a wall-clock seam."""
        return self._now_ms / 1000.0

    def schedule(self, delay_ms: int, fn: Callable[[], None]) -> Timer:
        if delay_ms < 0:
            raise ValueError("cannot schedule into the past")
        timer = Timer(fn)
        self._seq += 1
        heapq.heappush(self._heap, (self._now_ms + delay_ms, self._seq, timer))
        return timer

    def pending(self) -> int:
        return sum(1 for _, _, t in self._heap if not t.canceled)

    def next_at(self) -> int | None:
        """Timestamp of the next live event, or None when drained."""
        while self._heap and self._heap[0][2].canceled:
            heapq.heappop(self._heap)
        return self._heap[0][0] if self._heap else None

    def step(self) -> bool:
        """Advance to and run the next event.  False when drained."""
        while self._heap:
            at, _, timer = heapq.heappop(self._heap)
            if timer.canceled:
                continue
            self._now_ms = at
            timer.fn()
            return True
        return False
