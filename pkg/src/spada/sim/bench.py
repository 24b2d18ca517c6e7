"""Latency measurement on a loopback deployment.

Four quantities, timed from bus-frame arrivals against a monotonic
clock:

* ``t_start``: commit acknowledged to first result on the bus; covers
  notification, state fetch, container spin-up and the first publish;
* ``t_delay``: first result to second result, the steady publish
  cadence;
* ``t_exit``: last result to terminal status, exit detection plus the
  final submit;
* ``t_cycle``: commit to terminal status for a payload that connects
  and exits immediately, one full life cycle.

Two deployments: ``loopback`` runs the real stack (sockets, sandboxes,
threads) and measures wall time; ``simulated`` runs the deterministic
virtual-time deployment and reports virtual durations, which isolates
protocol overhead from host noise.

The reference table holds the same quantities measured on a physical
edge testbed (single-board clients on Wi-Fi against a cloud-hosted
server); loopback numbers land far below them, so they are printed for
scale, never asserted against.
"""

from __future__ import annotations

import queue
import statistics
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from ..bus import BusClient, assignment_topic
from ..devstack import DevStack

# Seconds, from the edge testbed write-up.
REFERENCE_LATENCIES = {
    "t_start": 4.282,
    "t_delay": 0.261,
    "t_exit": 1.198,
    "t_cycle": 5.640,
}

MEASUREMENTS = ("t_start", "t_delay", "t_exit", "t_cycle")
FRAME_TIMEOUT_S = 30.0

_PRELUDE = (
    "import json, os, socket\n"
    "_s = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)\n"
    "_s.connect(os.environ['SPADA_TASK_API'])\n"
    "_r = _s.makefile('rb')\n"
    "def _call(method, **params):\n"
    "    _s.sendall(json.dumps({'id': 1, 'method': method, 'params': params})"
    ".encode() + b'\\n')\n"
    "    resp = json.loads(_r.readline())\n"
    "    if 'err' in resp:\n"
    "        raise SystemExit(resp['err']['msg'])\n"
    "    return resp['ok']\n"
)
# Two results, then a clean exit: drives t_start, t_delay, t_exit.
PUBLISH_TWICE = _PRELUDE + "_call('publish', value={})\n_call('publish', value={})\n"
# Handshake only: drives t_cycle.
CONNECT_AND_EXIT = _PRELUDE


class BenchError(RuntimeError):
    pass


class _FrameTap:
    """Subscribes on the bus socket and stamps frames as they arrive.

    Reading happens on a dedicated thread so arrival times do not
    depend on what the measuring thread is busy with.
    """

    def __init__(self, addr: str) -> None:
        self._client = BusClient(addr)
        self._frames: queue.Queue = queue.Queue()
        self._thread = threading.Thread(
            target=self._pump, name="bench-bus-tap", daemon=True
        )
        self._thread.start()

    def _pump(self) -> None:
        for frame in self._client.frames():
            self._frames.put((time.perf_counter(), frame))

    def subscribe(self, topic: str) -> None:
        self._client.subscribe(topic)

    def next_event(self, topic: str, timeout: float = FRAME_TIMEOUT_S):
        """(arrival_time, event) for the next event frame on ``topic``."""
        deadline = time.monotonic() + timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise BenchError(f"no frame on {topic} within {timeout:.0f}s")
            try:
                at, frame = self._frames.get(timeout=remaining)
            except queue.Empty:
                continue
            if frame.get("topic") == topic and "event" in frame:
                return at, frame["event"]

    def close(self) -> None:
        self._client.close()
        self._thread.join(timeout=2)


@dataclass(slots=True)
class BenchReport:
    n: int
    samples: dict[str, list[float]] = field(default_factory=dict)
    deployment: str = "loopback"

    @property
    def sd_defined(self) -> bool:
        return self.n >= 2

    def stats(self, name: str) -> dict[str, float]:
        values = self.samples[name]
        return {
            "mean": statistics.fmean(values),
            "sd": statistics.stdev(values) if self.sd_defined else 0.0,
            "p5": _percentile(values, 0.05),
            "p95": _percentile(values, 0.95),
        }

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "deployment": self.deployment,
            "measurements": {
                name: {**self.stats(name), "samples": self.samples[name]}
                for name in MEASUREMENTS
            },
            "reference": dict(REFERENCE_LATENCIES),
        }


def _percentile(values: list[float], q: float) -> float:
    ordered = sorted(values)
    if len(ordered) == 1:
        return ordered[0]
    pos = q * (len(ordered) - 1)
    lo = int(pos)
    hi = min(lo + 1, len(ordered) - 1)
    return ordered[lo] + (ordered[hi] - ordered[lo]) * (pos - lo)


def format_report(report: BenchReport) -> str:
    lines = [
        f"latency over {report.n} iteration(s), {report.deployment} deployment"
        " (seconds)",
        f"{'':>8} {'mean':>9} {'sd':>9} {'p5':>9} {'p95':>9} {'reference':>10}",
    ]
    for name in MEASUREMENTS:
        s = report.stats(name)
        sd = f"{s['sd']:9.4f}" if report.sd_defined else f"{'n/a':>9}"
        lines.append(
            f"{name:>8} {s['mean']:9.4f} {sd} {s['p5']:9.4f} {s['p95']:9.4f}"
            f" {REFERENCE_LATENCIES[name]:10.3f}"
        )
    lines.append("reference column: physical edge testbed, for scale only")
    return "\n".join(lines)


def _await_finish(tap: _FrameTap, user, assignment_id: str, want_results: int):
    """Consume events until the terminal status; returns arrival times
    of the result frames and of the status frame."""
    topic = assignment_topic(assignment_id)
    result_times = []
    while True:
        at, event = tap.next_event(topic)
        if event["kind"] == "result":
            result_times.append(at)
            continue
        status = event["status"]
        if status != "FINISHED":
            report = user.await_assignment(assignment_id, timeout=5.0)
            logs = "; ".join(
                t.error_log.strip().splitlines()[0]
                for t in report.tasks.values()
                if t.error_log
            )
            raise BenchError(f"payload ended {status}: {logs or 'no error log'}")
        if len(result_times) != want_results:
            raise BenchError(
                f"expected {want_results} results, saw {len(result_times)}"
            )
        return result_times, at


def _event_times(trace, kind: str, event: str | None = None) -> list[int]:
    return [
        e["t"]
        for e in trace
        if e["ev"] == kind and (event is None or e.get("event") == event)
    ]


def _run_simulated(n: int) -> BenchReport:
    from .convergence import run_convergence_suite
    from .net import FaultSchedule

    samples: dict[str, list[float]] = {name: [] for name in MEASUREMENTS}
    for i in range(n):
        schedule = FaultSchedule(seed=i + 1)
        publisher = run_convergence_suite(
            schedule,
            {"clients": 1, "tasks": 1, "results_per_task": 2},
            commit_at="preboot",
        )
        toucher = run_convergence_suite(
            schedule,
            {"clients": 1, "tasks": 1, "results_per_task": 0},
            commit_at="preboot",
        )
        if not publisher.passed or not toucher.passed:
            raise BenchError(
                f"simulated run {i} did not converge: "
                f"{publisher.reason or toucher.reason}"
            )
        commit_at = _event_times(publisher.trace, "commit")[0]
        first, second = _event_times(publisher.trace, "bus-event", "result")
        finished = _event_times(publisher.trace, "bus-event", "status")[0]
        samples["t_start"].append((first - commit_at) / 1000.0)
        samples["t_delay"].append((second - first) / 1000.0)
        samples["t_exit"].append((finished - second) / 1000.0)
        cycle_commit = _event_times(toucher.trace, "commit")[0]
        cycle_done = _event_times(toucher.trace, "bus-event", "status")[0]
        samples["t_cycle"].append((cycle_done - cycle_commit) / 1000.0)
    return BenchReport(n=n, samples=samples, deployment="simulated")


def run_latency_bench(
    n: int = 100, deployment: str = "loopback", *, root: str | Path | None = None
) -> BenchReport:
    """Measure the four latencies over ``n`` iterations on a fresh
    single-agent stack of the chosen deployment."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if deployment == "simulated":
        return _run_simulated(n)
    if deployment != "loopback":
        raise ValueError(f"unknown deployment {deployment!r}")
    tmp = None
    if root is None:
        tmp = tempfile.TemporaryDirectory(prefix="spada-bench-")
        root = tmp.name
    samples: dict[str, list[float]] = {name: [] for name in MEASUREMENTS}
    stack = DevStack(
        root,
        n_agents=1,
        agent_overrides={
            "grace_seconds": 1.0,
            "retry_base_s": 0.05,
            "refetch_interval_s": 5.0,
        },
    )
    tap = None
    try:
        stack.start()
        client_id = stack.client_ids[0]
        tap = _FrameTap(stack.bus_server.addr)
        with stack.user() as user:
            deadline = time.monotonic() + FRAME_TIMEOUT_S
            while not any(
                row["client_id"] == client_id for row in user.get_clients()
            ):
                if time.monotonic() > deadline:
                    raise BenchError(f"{client_id} never registered")
                time.sleep(0.01)
            for i in range(n):
                measured = user.assignment(
                    f"bench-{i}",
                    [
                        user.task(
                            client_id,
                            user.payload(PUBLISH_TWICE, name=f"bench-{i}"),
                        )
                    ],
                )
                cycle = user.assignment(
                    f"cycle-{i}",
                    [
                        user.task(
                            client_id,
                            user.payload(CONNECT_AND_EXIT, name=f"cycle-{i}"),
                        )
                    ],
                )
                tap.subscribe(assignment_topic(measured.id))
                tap.subscribe(assignment_topic(cycle.id))

                t0 = time.perf_counter()
                measured.commit()
                result_times, status_at = _await_finish(
                    tap, user, measured.id, want_results=2
                )
                samples["t_start"].append(result_times[0] - t0)
                samples["t_delay"].append(result_times[1] - result_times[0])
                samples["t_exit"].append(status_at - result_times[1])

                t0 = time.perf_counter()
                cycle.commit()
                _, status_at = _await_finish(tap, user, cycle.id, want_results=0)
                samples["t_cycle"].append(status_at - t0)
    finally:
        if tap is not None:
            tap.close()
        stack.close()
        if tmp is not None:
            tmp.cleanup()
    return BenchReport(n=n, samples=samples)
