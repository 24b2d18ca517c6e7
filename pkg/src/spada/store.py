"""Server-side state: documents, results, per-client logical clocks.

MemoryStore is the reference implementation; FileStore layers an
append-only log plus snapshot underneath it for durability.  Both are
safe for concurrent use from handler threads; a single lock serializes
mutations, which is plenty at the intended scale (tens of clients).

A production deployment would swap in a document database behind the
same operations; StoreBackend spells out the contract such an adapter
has to meet.
"""

from __future__ import annotations

import logging
import os
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol

from .model import (
    AssignmentDoc,
    ClientStateSnapshot,
    ModelError,
    ParametersDoc,
    PayloadDoc,
    ResultRecord,
    TaskDoc,
    TaskStatus,
    TaskSummary,
    check_client_id,
    check_tree_value,
    clip_error_log,
)
from . import wire

logger = logging.getLogger(__name__)

DEFAULT_ONLINE_WINDOW_S = 30.0


class StoreError(Exception):
    pass


class UnknownClient(StoreError):
    pass


class UnknownDocument(StoreError):
    pass


class BadCommit(StoreError):
    """Duplicate ids or dangling references; nothing was applied."""


class BadQuery(StoreError):
    pass


class AppendOutcome(Enum):
    APPENDED = "appended"
    DUPLICATE = "duplicate"
    REJECTED = "rejected"


class StatusOutcome(Enum):
    APPLIED = "applied"
    IGNORED = "ignored"


@dataclass(slots=True)
class AppendResult:
    outcome: AppendOutcome
    new_ts: int | None = None
    assignment_id: str | None = None
    reason: str = ""


@dataclass(slots=True)
class StatusResult:
    outcome: StatusOutcome
    new_ts: int | None = None
    assignment_id: str | None = None


@dataclass(slots=True)
class CommitBatch:
    payloads: list[PayloadDoc] = field(default_factory=list)
    parameters: list[ParametersDoc] = field(default_factory=list)
    tasks: list[TaskDoc] = field(default_factory=list)
    assignments: list[AssignmentDoc] = field(default_factory=list)


@dataclass(slots=True)
class CommitOutcome:
    payload_ids: list[str]
    parameters_ids: list[str]
    task_ids: list[str]
    assignment_ids: list[str]
    # client_id -> new logical clock value, for notification fan-out.
    clock_updates: dict[str, int]
    # True when the whole batch was already committed verbatim and this
    # call changed nothing (a client retransmit after a lost response).
    replayed: bool = False


@dataclass(slots=True)
class _ClientInfo:
    ts: int = 0
    last_seen: int | None = None


class StoreBackend(Protocol):
    """Operations any storage adapter must provide."""

    def register_client(self, client_id: str) -> bool: ...
    def commit_documents(self, batch: CommitBatch) -> CommitOutcome: ...
    def fetch_client_state(self, client_id: str) -> ClientStateSnapshot: ...
    def append_result(
        self, task_id: str, seq: int, value: Any, produced_at: int
    ) -> AppendResult: ...
    def set_status(
        self, task_id: str, to: TaskStatus, error_log: str = ""
    ) -> StatusResult: ...
    def get_payload(self, payload_id: str) -> PayloadDoc | None: ...
    def get_parameters(self, parameters_id: str) -> ParametersDoc | None: ...
    def query(self, flt: dict[str, Any]) -> list[dict[str, Any]]: ...


class MemoryStore:
    def __init__(
        self,
        *,
        now_ms: Callable[[], int] | None = None,
        online_window_s: float = DEFAULT_ONLINE_WINDOW_S,
    ) -> None:
        import time

        self._now_ms = now_ms or (lambda: time.time_ns() // 1_000_000)
        self._online_window_ms = int(online_window_s * 1000)
        self._lock = threading.RLock()
        self._payloads: dict[str, PayloadDoc] = {}
        self._parameters: dict[str, ParametersDoc] = {}
        self._tasks: dict[str, TaskDoc] = {}
        self._assignments: dict[str, AssignmentDoc] = {}
        self._results: dict[str, list[ResultRecord]] = {}
        self._clients: dict[str, _ClientInfo] = {}

    # -- client registry ----------------------------------------------------

    def register_client(self, client_id: str) -> bool:
        """Idempotently create a client entry; True when it was new."""
        check_client_id(client_id)
        with self._lock:
            if client_id in self._clients:
                return False
            self._log_entry({"op": "register_client", "client_id": client_id})
            self._clients[client_id] = _ClientInfo()
            return True

    # -- commits ------------------------------------------------------------

    def commit_documents(self, batch: CommitBatch) -> CommitOutcome:
        """Validate and apply a batch atomically.

        References may point at documents inside the batch or already in
        the store.  On any validation failure nothing is applied.
        """
        with self._lock:
            if self._is_replay(batch):
                return CommitOutcome(
                    payload_ids=[d.id for d in batch.payloads],
                    parameters_ids=[d.id for d in batch.parameters],
                    task_ids=[d.id for d in batch.tasks],
                    assignment_ids=[d.id for d in batch.assignments],
                    clock_updates={},
                    replayed=True,
                )
            stamped = self._prepare_commit(batch)
            self._log_entry(
                {
                    "op": "commit",
                    "payloads": [d.to_wire() for d in stamped.payloads],
                    "parameters": [d.to_wire() for d in stamped.parameters],
                    "tasks": [d.to_wire() for d in stamped.tasks],
                    "assignments": [d.to_wire() for d in stamped.assignments],
                }
            )
            return self._apply_commit(stamped)

    def _is_replay(self, batch: CommitBatch) -> bool:
        """A batch whose every document already exists verbatim is a
        retransmit after a lost response and must succeed idempotently."""
        docs = [*batch.payloads, *batch.parameters, *batch.tasks, *batch.assignments]
        if not docs or not all(self._id_exists(d.id) for d in docs):
            return False
        volatile = {"created_at", "status", "result_count", "error_log", "terminal_at"}

        def same(doc, stored) -> bool:
            if stored is None:
                return False
            a, b = doc.to_wire(), stored.to_wire()
            return {k: v for k, v in a.items() if k not in volatile} == {
                k: v for k, v in b.items() if k not in volatile
            }

        return (
            all(same(d, self._payloads.get(d.id)) for d in batch.payloads)
            and all(same(d, self._parameters.get(d.id)) for d in batch.parameters)
            and all(same(d, self._tasks.get(d.id)) for d in batch.tasks)
            and all(same(d, self._assignments.get(d.id)) for d in batch.assignments)
        )

    def _prepare_commit(self, batch: CommitBatch) -> CommitBatch:
        now = self._now_ms()
        new_ids: set[str] = set()
        for doc in (*batch.payloads, *batch.parameters, *batch.tasks, *batch.assignments):
            if doc.id in new_ids:
                raise BadCommit(f"id {doc.id} appears twice in batch")
            if self._id_exists(doc.id):
                raise BadCommit(f"id {doc.id} already committed")
            new_ids.add(doc.id)

        batch_payloads = {d.id for d in batch.payloads}
        batch_parameters = {d.id for d in batch.parameters}
        batch_tasks = {d.id: d for d in batch.tasks}
        batch_assignments = {d.id: d for d in batch.assignments}

        for task in batch.tasks:
            if task.status is not TaskStatus.ACTIVE or task.result_count != 0:
                raise BadCommit(f"task {task.id} must be committed ACTIVE and empty")
            if task.client_id not in self._clients:
                raise UnknownClient(task.client_id)
            if task.payload_id not in batch_payloads and task.payload_id not in self._payloads:
                raise BadCommit(f"task {task.id} references missing payload")
            if task.parameters_id is not None:
                if (
                    task.parameters_id not in batch_parameters
                    and task.parameters_id not in self._parameters
                ):
                    raise BadCommit(f"task {task.id} references missing parameters")
            if (
                task.assignment_id not in batch_assignments
                and task.assignment_id not in self._assignments
            ):
                raise BadCommit(f"task {task.id} references missing assignment")

        for assignment in batch.assignments:
            for task_id in assignment.task_ids:
                task = batch_tasks.get(task_id) or self._tasks.get(task_id)
                if task is None:
                    raise BadCommit(f"assignment {assignment.id} lists missing task")
                if task.assignment_id != assignment.id:
                    raise BadCommit(
                        f"task {task_id} does not point back at assignment {assignment.id}"
                    )

        def stamp(doc, cls):
            raw = doc.to_wire()
            raw["created_at"] = now
            return cls.from_wire(raw)

        return CommitBatch(
            payloads=[stamp(d, PayloadDoc) for d in batch.payloads],
            parameters=[stamp(d, ParametersDoc) for d in batch.parameters],
            tasks=[stamp(d, TaskDoc) for d in batch.tasks],
            assignments=[stamp(d, AssignmentDoc) for d in batch.assignments],
        )

    def _apply_commit(self, stamped: CommitBatch) -> CommitOutcome:
        for doc in stamped.payloads:
            self._payloads[doc.id] = doc
        for doc in stamped.parameters:
            self._parameters[doc.id] = doc
        for doc in stamped.assignments:
            self._assignments[doc.id] = doc
        clock_updates: dict[str, int] = {}
        for task in stamped.tasks:
            self._tasks[task.id] = task
            self._results[task.id] = []
        # One clock bump per affected client per batch, not per task.
        for client_id in sorted({t.client_id for t in stamped.tasks}):
            info = self._clients.setdefault(client_id, _ClientInfo())
            info.ts += 1
            clock_updates[client_id] = info.ts
        return CommitOutcome(
            payload_ids=[d.id for d in stamped.payloads],
            parameters_ids=[d.id for d in stamped.parameters],
            task_ids=[d.id for d in stamped.tasks],
            assignment_ids=[d.id for d in stamped.assignments],
            clock_updates=clock_updates,
        )

    def _id_exists(self, doc_id: str) -> bool:
        return (
            doc_id in self._payloads
            or doc_id in self._parameters
            or doc_id in self._tasks
            or doc_id in self._assignments
        )

    # -- client state -------------------------------------------------------

    def fetch_client_state(self, client_id: str) -> ClientStateSnapshot:
        """Consistent (ts, active tasks) view; refreshes liveness."""
        with self._lock:
            info = self._clients.get(client_id)
            if info is None:
                raise UnknownClient(client_id)
            info.last_seen = self._now_ms()
            active = [
                t
                for t in self._tasks.values()
                if t.client_id == client_id and t.status is TaskStatus.ACTIVE
            ]
            active.sort(key=lambda t: (t.created_at, t.id))
            return ClientStateSnapshot(
                ts=info.ts,
                tasks=[
                    TaskSummary(
                        task_id=t.id,
                        payload_id=t.payload_id,
                        parameters_id=t.parameters_id,
                        result_count=t.result_count,
                    )
                    for t in active
                ],
            )

    # -- results and statuses ----------------------------------------------

    def append_result(
        self, task_id: str, seq: int, value: Any, produced_at: int
    ) -> AppendResult:
        with self._lock:
            task = self._tasks.get(task_id)
            if task is None:
                return AppendResult(AppendOutcome.REJECTED, reason="unknown task")
            if task.status is not TaskStatus.ACTIVE:
                return AppendResult(
                    AppendOutcome.REJECTED, reason=f"task is {task.status.value}"
                )
            if seq < task.result_count:
                return AppendResult(AppendOutcome.DUPLICATE)
            if seq > task.result_count:
                # The client assigns contiguous seqs, so a gap means a bug
                # or a forged batch; refuse rather than record a hole.
                return AppendResult(AppendOutcome.REJECTED, reason="seq gap")
            try:
                check_tree_value(value, "result value")
            except ModelError as exc:
                return AppendResult(AppendOutcome.REJECTED, reason=str(exc))
            record = ResultRecord(
                task_id=task_id,
                seq=seq,
                value=value,
                produced_at=produced_at,
                recorded_at=self._now_ms(),
            )
            self._log_entry({"op": "append_result", "record": record.to_wire()})
            self._results[task_id].append(record)
            task.result_count += 1
            info = self._clients.setdefault(task.client_id, _ClientInfo())
            info.ts += 1
            return AppendResult(
                AppendOutcome.APPENDED,
                new_ts=info.ts,
                assignment_id=task.assignment_id,
            )

    def set_status(
        self, task_id: str, to: TaskStatus, error_log: str = ""
    ) -> StatusResult:
        """Apply a terminal status; absorbing, so repeats are ignored."""
        with self._lock:
            task = self._tasks.get(task_id)
            if task is None:
                raise UnknownDocument(f"task {task_id}")
            if task.status is not TaskStatus.ACTIVE or to is TaskStatus.ACTIVE:
                return StatusResult(StatusOutcome.IGNORED)
            log = clip_error_log(error_log) if to is TaskStatus.ERROR else ""
            now = self._now_ms()
            self._log_entry(
                {
                    "op": "set_status",
                    "task_id": task_id,
                    "to": to.value,
                    "error_log": log,
                    "at": now,
                }
            )
            task.status = to
            task.error_log = log
            task.terminal_at = now
            info = self._clients.setdefault(task.client_id, _ClientInfo())
            info.ts += 1
            return StatusResult(
                StatusOutcome.APPLIED,
                new_ts=info.ts,
                assignment_id=task.assignment_id,
            )

    # -- reads --------------------------------------------------------------

    def get_payload(self, payload_id: str) -> PayloadDoc | None:
        with self._lock:
            return self._payloads.get(payload_id)

    def get_parameters(self, parameters_id: str) -> ParametersDoc | None:
        with self._lock:
            return self._parameters.get(parameters_id)

    def get_task(self, task_id: str) -> TaskDoc | None:
        with self._lock:
            return self._tasks.get(task_id)

    def query(self, flt: dict[str, Any]) -> list[dict[str, Any]]:
        if not isinstance(flt, dict):
            raise BadQuery("filter must be an object")
        kind = flt.get("kind")
        with self._lock:
            if kind == "tasks":
                return self._query_tasks(flt)
            if kind == "results":
                task_id = flt.get("task_id")
                if not isinstance(task_id, str):
                    raise BadQuery("results query needs task_id")
                records = self._results.get(task_id, [])
                return [r.to_wire() for r in records]
            if kind == "assignments":
                docs = self._assignments.values()
                if "assignment_id" in flt:
                    doc = self._assignments.get(flt["assignment_id"])
                    docs = [doc] if doc else []
                out = sorted(docs, key=lambda d: (d.created_at, d.id))
                return [d.to_wire() for d in out]
            if kind == "clients":
                return self._query_clients(bool(flt.get("online_only", False)))
            raise BadQuery(f"unknown query kind: {kind!r}")

    def _query_tasks(self, flt: dict[str, Any]) -> list[dict[str, Any]]:
        tasks: Iterable[TaskDoc] = self._tasks.values()
        if "task_id" in flt:
            doc = self._tasks.get(flt["task_id"])
            tasks = [doc] if doc else []
        if "assignment_id" in flt:
            tasks = [t for t in tasks if t.assignment_id == flt["assignment_id"]]
        if "client_id" in flt:
            tasks = [t for t in tasks if t.client_id == flt["client_id"]]
        if "status" in flt:
            try:
                wanted = TaskStatus(flt["status"])
            except ValueError as exc:
                raise BadQuery(f"unknown status {flt['status']!r}") from exc
            tasks = [t for t in tasks if t.status is wanted]
        if "created_after" in flt:
            tasks = [t for t in tasks if t.created_at >= int(flt["created_after"])]
        if "created_before" in flt:
            tasks = [t for t in tasks if t.created_at < int(flt["created_before"])]
        out = sorted(tasks, key=lambda t: (t.created_at, t.id))
        return [t.to_wire() for t in out]

    def _query_clients(self, online_only: bool) -> list[dict[str, Any]]:
        now = self._now_ms()
        rows = []
        for client_id in sorted(self._clients):
            info = self._clients[client_id]
            online = (
                info.last_seen is not None
                and now - info.last_seen <= self._online_window_ms
            )
            if online_only and not online:
                continue
            rows.append(
                {
                    "client_id": client_id,
                    "ts": info.ts,
                    "last_seen": info.last_seen,
                    "online": online,
                }
            )
        return rows

    def dump(self) -> dict[str, Any]:
        """Full state as one canonical tree, for comparison and snapshots."""
        with self._lock:
            return {
                "payloads": {i: d.to_wire() for i, d in self._payloads.items()},
                "parameters": {i: d.to_wire() for i, d in self._parameters.items()},
                "tasks": {i: d.to_wire() for i, d in self._tasks.items()},
                "assignments": {i: d.to_wire() for i, d in self._assignments.items()},
                "results": {
                    i: [r.to_wire() for r in rs] for i, rs in self._results.items()
                },
                "clients": {
                    i: {"ts": c.ts, "last_seen": c.last_seen}
                    for i, c in self._clients.items()
                },
            }

    def load_dump(self, raw: dict[str, Any]) -> None:
        with self._lock:
            self._payloads = {
                i: PayloadDoc.from_wire(d) for i, d in raw.get("payloads", {}).items()
            }
            self._parameters = {
                i: ParametersDoc.from_wire(d)
                for i, d in raw.get("parameters", {}).items()
            }
            self._tasks = {
                i: TaskDoc.from_wire(d) for i, d in raw.get("tasks", {}).items()
            }
            self._assignments = {
                i: AssignmentDoc.from_wire(d)
                for i, d in raw.get("assignments", {}).items()
            }
            self._results = {
                i: [ResultRecord.from_wire(r) for r in rs]
                for i, rs in raw.get("results", {}).items()
            }
            self._clients = {
                i: _ClientInfo(ts=c["ts"], last_seen=c.get("last_seen"))
                for i, c in raw.get("clients", {}).items()
            }

    # FileStore hooks in here; the in-memory store persists nothing.
    def _log_entry(self, entry: dict[str, Any]) -> None:
        pass


class FileStore(MemoryStore):
    """MemoryStore plus an append log and snapshot on disk.

    Every mutation is written to the log before it is applied, each
    record carrying its own CRC, so a process killed mid-write loses at
    most the unacknowledged tail.  ``compact`` folds the log into the
    snapshot.
    """

    LOG_NAME = "store.log"
    SNAPSHOT_NAME = "store.snapshot"

    def __init__(
        self,
        directory: str | Path,
        *,
        now_ms: Callable[[], int] | None = None,
        online_window_s: float = DEFAULT_ONLINE_WINDOW_S,
    ) -> None:
        super().__init__(now_ms=now_ms, online_window_s=online_window_s)
        self._dir = Path(directory)
        self._dir.mkdir(parents=True, exist_ok=True)
        self._log_path = self._dir / self.LOG_NAME
        self._snapshot_path = self._dir / self.SNAPSHOT_NAME
        self._recover()
        # Unbuffered append fd: one os.write per record.
        self._log_fd: int | None = os.open(
            self._log_path, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o600
        )

    def _recover(self) -> None:
        if self._snapshot_path.exists():
            self.load_dump(wire.decode_json(self._snapshot_path.read_bytes()))
        if not self._log_path.exists():
            return
        good_end = 0
        count = 0
        with open(self._log_path, "rb") as fh:
            for entry, end in wire.iter_records(fh):
                self._replay(entry)
                good_end = end
                count += 1
        size = self._log_path.stat().st_size
        if good_end < size:
            logger.warning(
                "truncating torn log tail: %d of %d bytes kept", good_end, size
            )
            with open(self._log_path, "r+b") as fh:
                fh.truncate(good_end)
        if count:
            logger.info("replayed %d log records", count)

    def _replay(self, entry: dict[str, Any]) -> None:
        op = entry.get("op")
        if op == "register_client":
            self._clients.setdefault(entry["client_id"], _ClientInfo())
        elif op == "commit":
            self._apply_commit(
                CommitBatch(
                    payloads=[PayloadDoc.from_wire(d) for d in entry["payloads"]],
                    parameters=[
                        ParametersDoc.from_wire(d) for d in entry["parameters"]
                    ],
                    tasks=[TaskDoc.from_wire(d) for d in entry["tasks"]],
                    assignments=[
                        AssignmentDoc.from_wire(d) for d in entry["assignments"]
                    ],
                )
            )
        elif op == "append_result":
            record = ResultRecord.from_wire(entry["record"])
            task = self._tasks.get(record.task_id)
            if task is None:
                logger.warning("log names unknown task %s", record.task_id)
                return
            self._results[record.task_id].append(record)
            task.result_count += 1
            self._clients.setdefault(task.client_id, _ClientInfo()).ts += 1
        elif op == "set_status":
            task = self._tasks.get(entry["task_id"])
            if task is None:
                logger.warning("log names unknown task %s", entry["task_id"])
                return
            task.status = TaskStatus(entry["to"])
            task.error_log = entry["error_log"]
            task.terminal_at = entry["at"]
            self._clients.setdefault(task.client_id, _ClientInfo()).ts += 1
        else:
            logger.warning("skipping unknown log op %r", op)

    def _log_entry(self, entry: dict[str, Any]) -> None:
        if self._log_fd is None:
            raise StoreError("store is closed")
        os.write(self._log_fd, wire.pack_record(entry))

    def compact(self) -> None:
        """Fold the log into the snapshot and start the log fresh."""
        with self._lock:
            if self._log_fd is None:
                raise StoreError("store is closed")
            tmp = self._snapshot_path.with_suffix(".tmp")
            tmp.write_bytes(wire.canonical_json_bytes(self.dump()))
            tmp.replace(self._snapshot_path)
            os.close(self._log_fd)
            self._log_fd = os.open(
                self._log_path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600
            )

    def close(self) -> None:
        with self._lock:
            if self._log_fd is not None:
                os.close(self._log_fd)
                self._log_fd = None
