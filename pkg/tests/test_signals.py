"""Signal plane semantics and the replay sources."""

from __future__ import annotations

import threading
import time

import pytest

from spada.signals import CsvReplay, RandomSource, SignalPlane


def test_get_signal_returns_latest_or_none():
    plane = SignalPlane()
    assert plane.get_signal("speed") is None
    plane.ingest("speed", 11.5, observed_at=100)
    plane.ingest("speed", 12.0, observed_at=200)
    reading = plane.get_signal("speed")
    assert reading.value == 12.0
    assert reading.observed_at == 200
    assert reading.generation == 2


def test_next_signal_requires_fresher_than_call():
    plane = SignalPlane()
    plane.ingest("speed", 1.0)
    # The cached value predates the call: not fresh enough.
    assert plane.next_signal("speed", timeout_s=0.05) is None

    got = {}

    def waiter():
        got["reading"] = plane.next_signal("speed", timeout_s=2.0)

    t = threading.Thread(target=waiter)
    t.start()
    time.sleep(0.05)
    plane.ingest("speed", 2.0)
    t.join(timeout=2)
    assert got["reading"].value == 2.0


def test_next_signal_wakes_on_same_value_republished():
    plane = SignalPlane()
    plane.ingest("speed", 7.0)

    def republish():
        time.sleep(0.05)
        plane.ingest("speed", 7.0)

    threading.Thread(target=republish).start()
    reading = plane.next_signal("speed", timeout_s=2.0)
    assert reading.value == 7.0
    assert reading.generation == 2


def test_next_signal_timeout_on_silent_name():
    plane = SignalPlane()
    start = time.monotonic()
    assert plane.next_signal("absent", timeout_s=0.1) is None
    assert time.monotonic() - start < 1.0


def test_delivery_trace_records_per_task():
    plane = SignalPlane(trace=True)

    def feed():
        for v in (1, 2, 3):
            time.sleep(0.02)
            plane.ingest("rpm", v)

    t = threading.Thread(target=feed)
    t.start()
    seen = [plane.next_signal("rpm", timeout_s=2.0, task_id="t-1").value for _ in range(3)]
    t.join()
    assert seen == [1, 2, 3]
    assert plane.delivered_to("t-1", "rpm") == [1, 2, 3]
    assert plane.delivered_to("t-2", "rpm") == []
    plane.get_signal("rpm", task_id="t-1")  # a get is traced but not "next"
    assert plane.delivered_to("t-1", "rpm") == [1, 2, 3]


def test_csv_replay_ingests_rows_on_schedule(tmp_path):
    trace = tmp_path / "trace.csv"
    trace.write_text("t_ms,speed,rpm\n0,10,900\n30,20,1100\n60,30,1300\n")
    plane = SignalPlane(trace=True)
    replay = CsvReplay(plane, trace, speed=1.0, loop=False)
    consumed = []

    def consume():
        while len(consumed) < 3:
            reading = plane.next_signal("speed", timeout_s=2.0)
            if reading is None:
                return
            consumed.append(reading.value)

    t = threading.Thread(target=consume)
    t.start()
    time.sleep(0.02)
    replay.start()
    t.join(timeout=3)
    replay.stop()
    assert consumed == [10, 20, 30]
    assert plane.get_signal("rpm").value == 1300


def test_csv_replay_loops_and_cycles_values(tmp_path):
    trace = tmp_path / "trace.csv"
    trace.write_text("t_ms,v\n0,48\n10,50\n20,52\n")
    plane = SignalPlane()
    replay = CsvReplay(plane, trace, speed=1.0, loop=True)
    seen = []

    def consume():
        while len(seen) < 7:
            reading = plane.next_signal("v", timeout_s=2.0)
            seen.append(reading.value)

    t = threading.Thread(target=consume)
    t.start()
    time.sleep(0.02)
    replay.start()
    t.join(timeout=5)
    replay.stop()
    assert seen == [48, 50, 52, 48, 50, 52, 48]


def test_csv_replay_rejects_bad_schema(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("time,speed\n0,1\n")
    with pytest.raises(ValueError):
        CsvReplay(SignalPlane(), bad)
    empty = tmp_path / "empty.csv"
    empty.write_text("t_ms,speed\n")
    with pytest.raises(ValueError):
        CsvReplay(SignalPlane(), empty)


def test_random_source_is_seed_reproducible():
    readings_a, readings_b = [], []
    for store in (readings_a, readings_b):
        plane = SignalPlane()
        src = RandomSource(plane, "noise", seed=42, period_ms=5, low=1.0, high=3.0)
        src.start()
        while len(store) < 5:
            reading = plane.next_signal("noise", timeout_s=2.0)
            store.append(reading.value)
        src.stop()
    assert readings_a == readings_b
    assert all(1.0 <= v <= 3.0 for v in readings_a)
