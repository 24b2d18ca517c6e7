"""The agent's synchronization loop as a pure state machine.

Everything that decides *what* the agent does next lives here, free of
sockets, threads and clocks, so the same transitions drive the real
agent, the simulated agent, and the exhaustive model check.

State invariants the loop maintains:

* single flight: at most one fetch-or-submit activity is outstanding,
  tracked by ``syncing_state``; at most one container reconciliation,
  tracked by ``syncing_locals``;
* dirty completeness: an output arriving while an activity is in
  flight sets ``dirty_state``, and the snapshot that completes the
  activity immediately spawns a submit, so nothing waits for a timer;
* monotone clock: ``ts`` never decreases; a snapshot older than ``ts``
  triggers a refetch instead of installing stale state.

Events are fed in one at a time; each call mutates the state and
returns the directives (activities to spawn) the runtime must act on.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Union

from ..model import ClientStateSnapshot, TaskStatus, TaskSummary

logger = logging.getLogger(__name__)


# -- data held per task on the client ---------------------------------------

@dataclass(frozen=True, slots=True)
class PendingResult:
    seq: int
    value: object
    produced_at: int


@dataclass(frozen=True, slots=True)
class PendingStatus:
    status: TaskStatus
    error_log: str = ""


@dataclass(slots=True)
class LocalTask:
    """Client-side bookkeeping for one task."""

    task_id: str
    payload_id: str = ""
    parameters_id: str | None = None
    pending_results: list[PendingResult] = field(default_factory=list)
    pending_status: PendingStatus | None = None
    # How many results the server has confirmed; pending seqs start here.
    submitted_count: int = 0
    running: bool = False

    def clone(self) -> "LocalTask":
        return LocalTask(
            task_id=self.task_id,
            payload_id=self.payload_id,
            parameters_id=self.parameters_id,
            pending_results=list(self.pending_results),
            pending_status=self.pending_status,
            submitted_count=self.submitted_count,
            running=self.running,
        )

    def has_pending(self) -> bool:
        return bool(self.pending_results) or self.pending_status is not None


def clone_locals(local: dict[str, LocalTask]) -> dict[str, LocalTask]:
    return {tid: entry.clone() for tid, entry in local.items()}


@dataclass(slots=True)
class AgentState:
    ts: int = 0
    tasks: list[TaskSummary] = field(default_factory=list)
    local: dict[str, LocalTask] = field(default_factory=dict)
    syncing_state: bool = False
    dirty_state: bool = False
    syncing_locals: bool = False
    # A snapshot asked for container reconciliation while one was
    # already running; run another pass when it completes.
    pending_local_sync: bool = False

    def canon(self) -> tuple:
        """Hashable canonical form, used to deduplicate explored states."""
        return (
            self.ts,
            tuple(
                (t.task_id, t.payload_id, t.parameters_id, t.result_count)
                for t in self.tasks
            ),
            tuple(
                (
                    tid,
                    e.payload_id,
                    e.parameters_id,
                    tuple(
                        (r.seq, _freeze(r.value), r.produced_at)
                        for r in e.pending_results
                    ),
                    None
                    if e.pending_status is None
                    else (e.pending_status.status.value, e.pending_status.error_log),
                    e.submitted_count,
                    e.running,
                )
                for tid, e in sorted(self.local.items())
            ),
            self.syncing_state,
            self.dirty_state,
            self.syncing_locals,
            self.pending_local_sync,
        )


def _freeze(value: object) -> object:
    if isinstance(value, dict):
        return tuple(sorted((k, _freeze(v)) for k, v in value.items()))
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    return value


# -- events -----------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class ClockNotify:
    """A retained-topic notification: the server clock reached ts."""

    ts: int


@dataclass(frozen=True, slots=True)
class RefetchTick:
    """Periodic safety net; refetch unless an activity is in flight."""


@dataclass(frozen=True, slots=True)
class NewState:
    """A fetch or submit activity completed with this snapshot."""

    snapshot: ClientStateSnapshot


@dataclass(frozen=True, slots=True)
class LocalsSynced:
    """Container reconciliation finished; the reconciled local map."""

    local: dict[str, LocalTask]


@dataclass(frozen=True, slots=True)
class TaskOutput:
    """A container produced a result or reached a terminal status."""

    task_id: str
    result: PendingResult | None = None
    status: PendingStatus | None = None


Event = Union[ClockNotify, RefetchTick, NewState, LocalsSynced, TaskOutput]


# -- directives -------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class SpawnFetch:
    pass


@dataclass(frozen=True, slots=True)
class SubmitBatch:
    results: tuple[tuple[str, PendingResult], ...]
    statuses: tuple[tuple[str, PendingStatus], ...]

    def to_params(self, client_id: str) -> dict:
        return {
            "client_id": client_id,
            "results": [
                {
                    "task_id": tid,
                    "seq": r.seq,
                    "value": r.value,
                    "produced_at": r.produced_at,
                }
                for tid, r in self.results
            ],
            "statuses": [
                {"task_id": tid, "status": s.status.value, "error_log": s.error_log}
                for tid, s in self.statuses
            ],
        }


@dataclass(frozen=True, slots=True)
class SpawnSubmit:
    batch: SubmitBatch


@dataclass(frozen=True, slots=True)
class SpawnLocalSync:
    """Reconcile running containers against this server view."""

    snapshot: ClientStateSnapshot
    local: dict[str, LocalTask]


Directive = Union[SpawnFetch, SpawnSubmit, SpawnLocalSync]


def build_submit_batch(state: AgentState) -> SubmitBatch:
    """Everything unconfirmed, results before statuses.

    Results must precede the terminal status of the same task so the
    server records them while the task is still ACTIVE.
    """
    results = []
    statuses = []
    for tid in sorted(state.local):
        entry = state.local[tid]
        for pending in entry.pending_results:
            results.append((tid, pending))
        if entry.pending_status is not None:
            statuses.append((tid, entry.pending_status))
    return SubmitBatch(results=tuple(results), statuses=tuple(statuses))


def _install_snapshot(state: AgentState, snapshot: ClientStateSnapshot) -> None:
    state.ts = snapshot.ts
    state.tasks = list(snapshot.tasks)
    by_id = {t.task_id: t for t in snapshot.tasks}
    for tid, entry in state.local.items():
        summary = by_id.get(tid)
        if summary is None:
            # Task left the active set: any unconfirmed output would be
            # rejected by the server, so it is no longer pending.
            entry.pending_results.clear()
            entry.pending_status = None
            continue
        if summary.result_count > entry.submitted_count:
            entry.submitted_count = summary.result_count
        entry.pending_results = [
            r for r in entry.pending_results if r.seq >= entry.submitted_count
        ]


def _merge_locals(
    current: dict[str, LocalTask], synced: dict[str, LocalTask]
) -> dict[str, LocalTask]:
    """Adopt the reconciled map but keep pendings that raced past it.

    The reconciliation worked on a clone taken when it was spawned;
    outputs that arrived since then live only in ``current`` and must
    not be clobbered.  Membership and running flags come from the
    reconciled map, which is newer in those respects.
    """
    merged: dict[str, LocalTask] = {}
    for tid, entry in synced.items():
        live = current.get(tid)
        if live is None:
            merged[tid] = entry
        else:
            live.payload_id = entry.payload_id
            live.parameters_id = entry.parameters_id
            live.running = entry.running
            merged[tid] = live
    return merged


def handle_event(state: AgentState, event: Event) -> list[Directive]:
    """Advance the loop by one event; returns activities to spawn."""
    if isinstance(event, ClockNotify):
        if event.ts > state.ts:
            state.ts = event.ts
            if not state.syncing_state:
                state.syncing_state = True
                return [SpawnFetch()]
        return []

    if isinstance(event, RefetchTick):
        if not state.syncing_state:
            state.syncing_state = True
            return [SpawnFetch()]
        return []

    if isinstance(event, NewState):
        snapshot = event.snapshot
        if snapshot.ts < state.ts:
            # Stale read: the server moved on while this was in flight.
            return [SpawnFetch()]
        _install_snapshot(state, snapshot)
        if state.dirty_state:
            state.dirty_state = False
            return [SpawnSubmit(build_submit_batch(state))]
        state.syncing_state = False
        if state.syncing_locals:
            state.pending_local_sync = True
            return []
        state.syncing_locals = True
        return [
            SpawnLocalSync(
                snapshot=ClientStateSnapshot(ts=state.ts, tasks=list(state.tasks)),
                local=clone_locals(state.local),
            )
        ]

    if isinstance(event, LocalsSynced):
        state.local = _merge_locals(state.local, event.local)
        state.syncing_locals = False
        if state.pending_local_sync:
            state.pending_local_sync = False
            state.syncing_locals = True
            return [
                SpawnLocalSync(
                    snapshot=ClientStateSnapshot(ts=state.ts, tasks=list(state.tasks)),
                    local=clone_locals(state.local),
                )
            ]
        return []

    if isinstance(event, TaskOutput):
        entry = state.local.get(event.task_id)
        if entry is None:
            logger.warning("output for unknown task %s dropped", event.task_id)
            return []
        if event.result is not None:
            entry.pending_results.append(event.result)
        if event.status is not None:
            entry.pending_status = event.status
            entry.running = False
        if state.syncing_state:
            state.dirty_state = True
            return []
        state.syncing_state = True
        return [SpawnSubmit(build_submit_batch(state))]

    raise TypeError(f"unknown event {event!r}")


def initial_state(
    cached: dict[str, LocalTask] | None = None,
) -> tuple[AgentState, list[Directive]]:
    """State at agent start, after replaying the durable cache.

    The first fetch is always spawned: the agent does not know the
    server clock yet.  Replayed pendings mark the state dirty so the
    fetch's snapshot immediately triggers their resubmission.
    """
    state = AgentState(local=clone_locals(cached) if cached else {})
    state.syncing_state = True
    state.dirty_state = any(e.has_pending() for e in state.local.values())
    return state, [SpawnFetch()]


__all__ = [
    "AgentState",
    "ClockNotify",
    "Directive",
    "Event",
    "LocalTask",
    "LocalsSynced",
    "NewState",
    "PendingResult",
    "PendingStatus",
    "RefetchTick",
    "SpawnFetch",
    "SpawnLocalSync",
    "SpawnSubmit",
    "SubmitBatch",
    "TaskOutput",
    "build_submit_batch",
    "clone_locals",
    "handle_event",
    "initial_state",
]
