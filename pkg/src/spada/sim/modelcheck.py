"""Exhaustive state-space exploration of the synchronization loop.

One client, one task, a bounded producer.  The agent side is the real
``core.handle_event``; the server, network and container are abstracted
to the few facts the loop can observe.  Messages in flight are part of
the world state, so every interleaving of deliveries, notifications,
ticks and container outputs within the depth bound is explored.  A
fetch travels in two hops: the request is in flight until the server
serves it (capturing the snapshot then), and the response is in flight
until delivered; the server can move on in between, which is exactly
what makes a delivered snapshot stale.

Two invariants are checked on every reached state:

* single flight: the loop never spawns a fetch or submit while one is
  outstanding, and never overlaps container reconciliations;
* no stranded output: if a task has unconfirmed results or an
  unconfirmed terminal status, something must still be in motion that
  will carry them to the server (an activity, a reconcile pass, or a
  container that will emit again).

``mutant=True`` disables the dirty-state flag after every transition,
planting the classic lost-update bug: outputs that arrive while a
submit is in flight are forgotten.  The checker is expected to find a
counterexample for the mutant and none for the real loop.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Any, Callable

from ..agent import core
from ..model import ClientStateSnapshot, TaskStatus, TaskSummary

TASK_ID = "t" * 32
PAYLOAD_ID = "p" * 32


class _Violation(Exception):
    pass


@dataclass(slots=True)
class CheckResult:
    verdict: str  # "PASS" or "FAIL"
    states: int
    transitions: int
    violation: str | None = None
    counterexample: list[str] | None = None

    @property
    def passed(self) -> bool:
        return self.verdict == "PASS"


class _World:
    """Agent state plus the abstracted server, wire and container."""

    __slots__ = (
        "agent",
        "committed",
        "terminal",
        "result_count",
        "ts",
        "inflight",
        "sync_job",
        "produced",
        "finished_sent",
        "container_running",
    )

    def __init__(self) -> None:
        self.agent, directives = core.initial_state()
        self.committed = False
        self.terminal = False
        self.result_count = 0
        self.ts = 0
        self.inflight: tuple | None = None
        self.sync_job: tuple | None = None
        self.produced = 0
        self.finished_sent = False
        self.container_running = False
        self._absorb(directives, mutant=False)

    def clone(self) -> "_World":
        w = _World.__new__(_World)
        w.agent = core.AgentState(
            ts=self.agent.ts,
            tasks=list(self.agent.tasks),
            local=core.clone_locals(self.agent.local),
            syncing_state=self.agent.syncing_state,
            dirty_state=self.agent.dirty_state,
            syncing_locals=self.agent.syncing_locals,
            pending_local_sync=self.agent.pending_local_sync,
        )
        w.committed = self.committed
        w.terminal = self.terminal
        w.result_count = self.result_count
        w.ts = self.ts
        w.inflight = self.inflight
        w.sync_job = self.sync_job
        w.produced = self.produced
        w.finished_sent = self.finished_sent
        w.container_running = self.container_running
        return w

    # -- server mirror -------------------------------------------------------

    def snapshot(self) -> ClientStateSnapshot:
        tasks = []
        if self.committed and not self.terminal:
            tasks.append(
                TaskSummary(
                    task_id=TASK_ID,
                    payload_id=PAYLOAD_ID,
                    parameters_id=None,
                    result_count=self.result_count,
                )
            )
        return ClientStateSnapshot(ts=self.ts, tasks=tasks)

    def apply_batch(self, batch: core.SubmitBatch) -> None:
        for tid, pending in batch.results:
            if tid != TASK_ID or not self.committed or self.terminal:
                continue
            if pending.seq == self.result_count:
                self.result_count += 1
                self.ts += 1
            elif pending.seq > self.result_count:
                raise _Violation(f"seq gap at server: {pending.seq}")
        for tid, _status in batch.statuses:
            if tid == TASK_ID and self.committed and not self.terminal:
                self.terminal = True
                self.ts += 1

    # -- loop plumbing -------------------------------------------------------

    def deliver(self, event: core.Event, mutant: bool) -> None:
        self._absorb(core.handle_event(self.agent, event), mutant)

    def _absorb(self, directives: list[core.Directive], mutant: bool) -> None:
        if mutant:
            self.agent.dirty_state = False
        for directive in directives:
            if isinstance(directive, core.SpawnFetch):
                if self.inflight is not None:
                    raise _Violation("fetch spawned while an activity in flight")
                self.inflight = ("fetch-wait", None)
            elif isinstance(directive, core.SpawnSubmit):
                if self.inflight is not None:
                    raise _Violation("submit spawned while an activity in flight")
                self.inflight = ("submit", directive.batch)
            elif isinstance(directive, core.SpawnLocalSync):
                if self.sync_job is not None:
                    raise _Violation("overlapping container reconciliation")
                self.sync_job = (directive.snapshot, directive.local)

    # -- canonical form ------------------------------------------------------

    def canon(self) -> tuple:
        if self.inflight is None:
            flight: Any = None
        elif self.inflight[0] == "fetch-wait":
            flight = ("fetch-wait",)
        elif self.inflight[0] == "fetch":
            snap = self.inflight[1]
            flight = (
                "fetch",
                snap.ts,
                tuple((t.task_id, t.result_count) for t in snap.tasks),
            )
        else:
            batch = self.inflight[1]
            flight = (
                "submit",
                tuple((tid, r.seq, r.value) for tid, r in batch.results),
                tuple((tid, s.status.value) for tid, s in batch.statuses),
            )
        if self.sync_job is None:
            job: Any = None
        else:
            snap, local = self.sync_job
            job = (
                snap.ts,
                tuple((t.task_id, t.result_count) for t in snap.tasks),
                tuple(
                    (tid, len(e.pending_results), e.pending_status is not None,
                     e.submitted_count, e.running)
                    for tid, e in sorted(local.items())
                ),
            )
        return (
            self.agent.canon(),
            self.committed,
            self.terminal,
            self.result_count,
            self.ts,
            flight,
            job,
            self.produced,
            self.finished_sent,
            self.container_running,
        )


def _reconcile(world: _World, mutant: bool) -> None:
    snapshot, job_local = world.sync_job
    world.sync_job = None
    local = core.clone_locals(job_local)
    active = {t.task_id: t for t in snapshot.tasks}
    for tid in [t for t in local if t not in active]:
        local.pop(tid)
        world.container_running = False
    to_start = []
    for tid, summary in active.items():
        entry = local.get(tid)
        if entry is None:
            entry = core.LocalTask(task_id=tid)
            local[tid] = entry
        entry.payload_id = summary.payload_id
        entry.parameters_id = summary.parameters_id
        if entry.pending_status is not None:
            continue
        if entry.running and world.container_running:
            continue
        entry.running = True
        to_start.append(tid)
    world.deliver(core.LocalsSynced(core.clone_locals(local)), mutant)
    if to_start:
        world.container_running = True


def _next_seq(world: _World) -> int:
    # The durable outbox allocates confirmed + pending; the agent entry
    # tracks exactly that while the task is alive.
    entry = world.agent.local[TASK_ID]
    return entry.submitted_count + len(entry.pending_results)


def _events(
    produce_cap: int, mutant: bool
) -> list[tuple[str, Callable[[_World], bool], Callable[[_World], None]]]:
    def apply_commit(w: _World) -> None:
        w.committed = True
        w.ts += 1

    def apply_notify(w: _World) -> None:
        w.deliver(core.ClockNotify(w.ts), mutant)

    def apply_tick(w: _World) -> None:
        w.deliver(core.RefetchTick(), mutant)

    def apply_fetch_served(w: _World) -> None:
        w.inflight = ("fetch", w.snapshot())

    def apply_fetch_done(w: _World) -> None:
        snap = w.inflight[1]
        w.inflight = None
        w.deliver(core.NewState(snap), mutant)

    def apply_submit_done(w: _World) -> None:
        batch = w.inflight[1]
        w.inflight = None
        w.apply_batch(batch)
        w.deliver(core.NewState(w.snapshot()), mutant)

    def apply_localsync_done(w: _World) -> None:
        _reconcile(w, mutant)

    def apply_produce(w: _World) -> None:
        seq = _next_seq(w)
        w.produced += 1
        w.deliver(
            core.TaskOutput(
                task_id=TASK_ID,
                result=core.PendingResult(seq=seq, value=seq, produced_at=0),
            ),
            mutant,
        )

    def apply_finish(w: _World) -> None:
        w.finished_sent = True
        w.container_running = False
        w.deliver(
            core.TaskOutput(
                task_id=TASK_ID,
                status=core.PendingStatus(status=TaskStatus.FINISHED),
            ),
            mutant,
        )

    return [
        ("commit", lambda w: not w.committed, apply_commit),
        ("notify", lambda w: w.ts > 0, apply_notify),
        ("tick", lambda w: True, apply_tick),
        (
            "fetch-served",
            lambda w: w.inflight is not None and w.inflight[0] == "fetch-wait",
            apply_fetch_served,
        ),
        (
            "fetch-done",
            lambda w: w.inflight is not None and w.inflight[0] == "fetch",
            apply_fetch_done,
        ),
        (
            "submit-done",
            lambda w: w.inflight is not None and w.inflight[0] == "submit",
            apply_submit_done,
        ),
        ("localsync-done", lambda w: w.sync_job is not None, apply_localsync_done),
        (
            "produce",
            lambda w: w.container_running and w.produced < produce_cap,
            apply_produce,
        ),
        (
            "finish",
            lambda w: w.container_running
            and w.produced >= produce_cap
            and not w.finished_sent,
            apply_finish,
        ),
    ]


def _stranded(world: _World) -> bool:
    entry = world.agent.local.get(TASK_ID)
    if entry is None or not entry.has_pending():
        return False
    # An in-flight fetch or submit resolves pendings when it completes;
    # a reconcile pass does not, so it cannot excuse them.
    if world.agent.syncing_state or world.inflight is not None:
        return False
    # A live container will emit again, and that output spawns a submit.
    return not world.container_running


def model_check_sync_loop(
    depth: int, *, mutant: bool = False, produce_cap: int = 2
) -> CheckResult:
    """Breadth-first exploration of every event interleaving to ``depth``."""
    events = _events(produce_cap, mutant)
    root = _World()
    seen = {root.canon()}
    frontier: deque[tuple[_World, list[str]]] = deque([(root, [])])
    transitions = 0
    for _ in range(depth):
        nxt: deque[tuple[_World, list[str]]] = deque()
        while frontier:
            world, path = frontier.popleft()
            for name, enabled, apply in events:
                if not enabled(world):
                    continue
                child = world.clone()
                transitions += 1
                try:
                    apply(child)
                except _Violation as exc:
                    return CheckResult(
                        "FAIL",
                        len(seen),
                        transitions,
                        violation=str(exc),
                        counterexample=path + [name],
                    )
                if _stranded(child):
                    return CheckResult(
                        "FAIL",
                        len(seen),
                        transitions,
                        violation="stranded pending output",
                        counterexample=path + [name],
                    )
                key = child.canon()
                if key not in seen:
                    seen.add(key)
                    nxt.append((child, path + [name]))
        frontier = nxt
        if not frontier:
            break
    return CheckResult("PASS", len(seen), transitions)
