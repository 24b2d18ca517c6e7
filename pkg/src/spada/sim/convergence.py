"""Drive a simulated deployment through a fault schedule to quiescence.

The suite commits a workload, lets the schedule interfere, and then
checks the end state against what the producers actually generated:
every produced result stored exactly once with contiguous seqs, every
task FINISHED, every outbox drained.  The trace is replayable: the
same schedule produces the same event list, byte for byte.
"""

from __future__ import annotations

import random
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .. import wire
from ..model import TaskStatus, new_document_id
from .deployment import SimWorld
from .net import FaultSchedule

# Commits land inside this window (virtual ms) when staggered.
COMMIT_WINDOW_MS = (50, 1500)
QUIESCENCE_GRACE_MS = 30_000
STEP_BUDGET = 2_000_000
TASKS_PER_ASSIGNMENT = 3


@dataclass(slots=True)
class SuiteResult:
    verdict: str  # "PASS" or "FAIL"
    reason: str
    schedule: FaultSchedule
    trace: list[dict[str, Any]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.verdict == "PASS"

    def write_trace(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            for event in self.trace:
                fh.write(wire.canonical_json_bytes(event) + b"\n")


def _build_workload(world: SimWorld, workload: dict, rng: random.Random,
                    commit_at: str) -> tuple[list[str], int]:
    """Mint documents and schedule their commits; returns task ids and
    the time of the last commit."""
    client_ids = list(world.agents)
    payload_id = new_document_id(rng.randbytes)
    n_tasks = int(workload["tasks"])
    tasks = []
    for i in range(n_tasks):
        tasks.append(
            {
                "id": new_document_id(rng.randbytes),
                "client_id": client_ids[i % len(client_ids)],
                "payload_id": payload_id,
                "parameters_id": None,
                "status": "ACTIVE",
                "result_count": 0,
            }
        )
    batches = []
    for start in range(0, n_tasks, TASKS_PER_ASSIGNMENT):
        group = tasks[start : start + TASKS_PER_ASSIGNMENT]
        assignment_id = new_document_id(rng.randbytes)
        for task in group:
            task["assignment_id"] = assignment_id
        batches.append(
            {
                "payloads": [],
                "parameters": [],
                "tasks": group,
                "assignments": [
                    {
                        "id": assignment_id,
                        "name": f"wave-{start // TASKS_PER_ASSIGNMENT}",
                        "task_ids": [t["id"] for t in group],
                    }
                ],
            }
        )
    if batches:
        # The shared payload rides in the first batch only.
        batches[0]["payloads"] = [
            {"id": payload_id, "name": "sim", "body": "pass\n"}
        ]
    last_commit = 0
    if commit_at == "preboot":
        for batch in batches:
            world.commit(batch)
    else:
        times = sorted(
            rng.randint(*COMMIT_WINDOW_MS) for _ in range(len(batches))
        )
        for at, batch in zip(times, batches):
            world.clock.schedule(at, lambda b=batch: world.commit(b))
        last_commit = times[-1] if times else 0
    return [t["id"] for t in tasks], last_commit


def _converged(world: SimWorld, expected: list[str]) -> bool:
    for tid in expected:
        task = world.store.get_task(tid)
        if (
            task is None
            or task.status is not TaskStatus.FINISHED
            or task.result_count != world.results_per_task
        ):
            return False
    clocks = {
        row["client_id"]: row["ts"]
        for row in world.store.query({"kind": "clients"})
    }
    for agent in world.agents.values():
        if not agent.up or agent.state is None:
            return False
        if agent.inflight or agent.reconciling:
            return False
        s = agent.state
        if s.syncing_state or s.syncing_locals or s.dirty_state or s.pending_local_sync:
            return False
        if s.local or agent.cache.local_tasks():
            return False
        if s.ts != clocks.get(agent.client_id, -1):
            return False
    return True


def _verify(world: SimWorld, expected: list[str]) -> list[str]:
    problems = []
    stored: set[tuple[str, int]] = set()
    for tid in sorted(expected):
        task = world.store.get_task(tid)
        if task is None or task.status is not TaskStatus.FINISHED:
            problems.append(f"task {tid} not FINISHED")
            continue
        rows = world.store.query({"kind": "results", "task_id": tid})
        seqs = [r["seq"] for r in rows]
        if seqs != list(range(world.results_per_task)):
            problems.append(f"task {tid} seqs not contiguous: {seqs}")
        for row in rows:
            key = (tid, row["seq"])
            stored.add(key)
            want = world.produced.get(key)
            if want != row["value"]:
                problems.append(f"result {key} value mismatch")
        if task.result_count != len(rows):
            problems.append(f"task {tid} result_count drifted")
    missing = sorted(set(world.produced) - stored)
    if missing:
        problems.append(f"produced but never stored: {missing[:5]}")
    for agent in world.agents.values():
        leftovers = agent.cache.local_tasks()
        if leftovers:
            problems.append(
                f"{agent.client_id} outbox still holds {sorted(leftovers)}"
            )
    return problems


def run_convergence_suite(
    schedule: FaultSchedule,
    workload: dict,
    *,
    root: str | Path | None = None,
    refetch_enabled: bool = True,
    commit_at: str = "staggered",
    crash_windows: tuple[tuple[str, int, str], ...] = (),
) -> SuiteResult:
    """Run one schedule against one workload and judge the outcome.

    ``workload`` holds ``clients``, ``tasks`` and ``results_per_task``.
    ``crash_windows`` entries (client_id, nth_publish, window) kill an
    agent at an exact point of the publish/submit handshake; windows
    are "before-submit" and "after-delivery".
    """
    tmp = None
    if root is None:
        tmp = tempfile.TemporaryDirectory(prefix="spada-sim-")
        root = tmp.name
    client_ids = [f"sim-{i}" for i in range(1, int(workload["clients"]) + 1)]
    world = SimWorld(
        schedule,
        root,
        client_ids,
        results_per_task=int(workload["results_per_task"]),
        refetch_enabled=refetch_enabled,
    )
    try:
        rng = random.Random(schedule.seed ^ 0xA5A5_A5A5)
        expected, last_commit = _build_workload(world, workload, rng, commit_at)
        for client_id, nth, window in crash_windows:
            world.plan_crash(client_id, nth, window)
        world.start()
        bound = max(schedule.last_fault_ms(), last_commit) + QUIESCENCE_GRACE_MS

        converged = False
        for _ in range(STEP_BUDGET):
            if _converged(world, expected):
                converged = True
                break
            upcoming = world.clock.next_at()
            if upcoming is None or upcoming > bound:
                break
            world.clock.step()
        else:
            return SuiteResult(
                "FAIL", "step budget exhausted", schedule, world.events
            )

        if not converged:
            world.trace("quiescence-timeout", bound=bound)
            return SuiteResult(
                "FAIL",
                f"no quiescence by t={bound}ms",
                schedule,
                world.events,
            )
        problems = _verify(world, expected)
        world.trace("verdict", result="PASS" if not problems else "FAIL")
        if problems:
            return SuiteResult("FAIL", "; ".join(problems), schedule, world.events)
        return SuiteResult("PASS", "", schedule, world.events)
    finally:
        world.close()
        if tmp is not None:
            tmp.cleanup()
