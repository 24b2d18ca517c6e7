"""Latest-value signal cache plus the local sources that feed it.

Payloads read signals through two operations: ``get_signal`` returns
the cached latest value immediately, ``next_signal`` blocks until a
value *fresher than the call* arrives.  Freshness is tracked with a
per-name generation counter rather than timestamps, so a source that
re-publishes the same value still wakes waiters, and a waiter can
never be satisfied by a stale cache entry.

Two source adapters are included for desk use: CsvReplay walks a
captured trace file on a wall-clock schedule, RandomSource emits a
seeded synthetic stream.  A real vehicle feed would call
``SignalPlane.ingest`` from its own adapter in exactly the same way.
"""

from __future__ import annotations

import csv
import logging
import random
import threading
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .clocks import Clock, WALL_CLOCK

logger = logging.getLogger(__name__)

TRACE_DEPTH = 100_000


@dataclass(slots=True)
class SignalReading:
    name: str
    value: Any
    observed_at: int
    generation: int


class SignalPlane:
    def __init__(self, *, clock: Clock = WALL_CLOCK, trace: bool = False) -> None:
        self._clock = clock
        self._cond = threading.Condition()
        self._latest: dict[str, SignalReading] = {}
        # Delivery trace: every reading handed to a payload, in order.
        # Enabled per plane; used by tests to recompute oracles.
        self.trace: deque[dict[str, Any]] | None = (
            deque(maxlen=TRACE_DEPTH) if trace else None
        )

    def ingest(self, name: str, value: Any, observed_at: int | None = None) -> None:
        with self._cond:
            prev = self._latest.get(name)
            self._latest[name] = SignalReading(
                name=name,
                value=value,
                observed_at=(
                    observed_at if observed_at is not None else self._clock.now_ms()
                ),
                generation=(prev.generation + 1 if prev else 1),
            )
            self._cond.notify_all()

    def get_signal(self, name: str, *, task_id: str | None = None) -> SignalReading | None:
        with self._cond:
            reading = self._latest.get(name)
        if reading is not None:
            self._record(task_id, "get", reading)
        return reading

    def next_signal(
        self, name: str, timeout_s: float | None = None, *, task_id: str | None = None
    ) -> SignalReading | None:
        """Block for a value ingested after this call; None on timeout."""
        deadline = None if timeout_s is None else time.monotonic() + timeout_s
        with self._cond:
            floor = self._latest[name].generation if name in self._latest else 0
            while True:
                reading = self._latest.get(name)
                if reading is not None and reading.generation > floor:
                    break
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return None
                self._cond.wait(timeout=remaining)
        self._record(task_id, "next", reading)
        return reading

    def _record(self, task_id: str | None, kind: str, reading: SignalReading) -> None:
        if self.trace is not None:
            self.trace.append(
                {
                    "task_id": task_id,
                    "kind": kind,
                    "name": reading.name,
                    "value": reading.value,
                    "observed_at": reading.observed_at,
                }
            )

    def delivered_to(self, task_id: str, name: str | None = None) -> list[Any]:
        """Values this task actually consumed via next_signal, in order."""
        if self.trace is None:
            return []
        return [
            t["value"]
            for t in list(self.trace)
            if t["task_id"] == task_id
            and t["kind"] == "next"
            and (name is None or t["name"] == name)
        ]


def _parse_cell(text: str) -> Any:
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


class CsvReplay:
    """Replay a captured signal trace on a wall-clock schedule.

    File format: a header row starting with ``t_ms`` followed by one
    column per signal name; each further row gives the offset in
    milliseconds and the values observed then.  ``speed`` scales time
    (2.0 replays twice as fast); ``loop`` restarts at the end.
    """

    def __init__(
        self,
        plane: SignalPlane,
        path: str | Path,
        *,
        speed: float = 1.0,
        loop: bool = True,
        clock: Clock = WALL_CLOCK,
    ) -> None:
        if speed <= 0:
            raise ValueError("speed must be positive")
        self._plane = plane
        self._clock = clock
        self._speed = speed
        self._loop = loop
        self._rows: list[tuple[int, dict[str, Any]]] = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if not header or header[0] != "t_ms":
                raise ValueError("first column must be t_ms")
            names = header[1:]
            if not names:
                raise ValueError("no signal columns")
            for row in reader:
                if not row or not row[0].strip():
                    continue
                t_ms = int(row[0])
                values = {
                    name: _parse_cell(cell) for name, cell in zip(names, row[1:])
                }
                self._rows.append((t_ms, values))
        if not self._rows:
            raise ValueError("trace has no rows")
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def start(self) -> None:
        self._thread = threading.Thread(
            target=self._run, name="csv-replay", daemon=True
        )
        self._thread.start()

    def _run(self) -> None:
        base_t = self._rows[0][0]
        # A loop restarts one inter-row gap after the last row, so the
        # final value is not immediately overwritten by the next cycle.
        if len(self._rows) > 1:
            trailing = self._rows[-1][0] - self._rows[-2][0]
        else:
            trailing = 1000
        span = self._rows[-1][0] - base_t + max(trailing, 1)
        cycle = 0
        start = self._clock.monotonic()
        while not self._stop.is_set():
            for t_ms, values in self._rows:
                offset = (cycle * span + (t_ms - base_t)) / 1000.0 / self._speed
                delay = start + offset - self._clock.monotonic()
                if delay > 0 and self._stop.wait(delay):
                    return
                for name, value in values.items():
                    self._plane.ingest(name, value)
            if not self._loop:
                return
            cycle += 1

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)


class RandomSource:
    """Seeded uniform noise on a fixed period; the value sequence is
    reproducible for a given seed, timing is wall clock."""

    def __init__(
        self,
        plane: SignalPlane,
        name: str,
        *,
        seed: int,
        period_ms: int = 1000,
        low: float = 0.0,
        high: float = 1.0,
    ) -> None:
        self._plane = plane
        self._name = name
        self._rng = random.Random(seed)
        self._period_s = period_ms / 1000.0
        self._low = low
        self._high = high
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def start(self) -> None:
        self._thread = threading.Thread(
            target=self._run, name=f"random-{self._name}", daemon=True
        )
        self._thread.start()

    def _run(self) -> None:
        while not self._stop.is_set():
            self._plane.ingest(self._name, self._rng.uniform(self._low, self._high))
            if self._stop.wait(self._period_s):
                return

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)
