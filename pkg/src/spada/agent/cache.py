"""Durable outbox: task output survives agent crashes until confirmed.

Every result is logged (and optionally fsynced) *before* its event
enters the sync loop, so a crash between publish and submit cannot
lose it; replay on the next start resubmits and the server's seq
dedup keeps delivery exactly once.

Record kinds in the append log:

* result   - a published value with its allocated seq
* status   - a terminal status reported by the container
* trim     - the server confirmed results below a seq; drop them
* drop     - the task is gone (canceled or fully confirmed terminal)

Seq allocation lives here because it must be consistent with what the
log already holds: next seq = confirmed + pending.
"""

from __future__ import annotations

import logging
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .. import wire
from ..model import TaskStatus
from .core import LocalTask, PendingResult, PendingStatus

logger = logging.getLogger(__name__)

# Rewrite the log at load when it carries this many times more records
# than live pendings; keeps restart cost bounded.
COMPACT_RATIO = 4


class ClosedTask(Exception):
    """Output arrived for a task the cache has already dropped."""


@dataclass(slots=True)
class _Entry:
    submitted: int = 0
    pending: list[PendingResult] = field(default_factory=list)
    status: PendingStatus | None = None
    payload_id: str = ""
    parameters_id: str | None = None


class DurableCache:
    def __init__(self, path: str | Path, *, fsync: bool = True) -> None:
        self._path = Path(path)
        self._path.parent.mkdir(parents=True, exist_ok=True)
        self._fsync = fsync
        self._lock = threading.Lock()
        self._entries: dict[str, _Entry] = {}
        self._dropped: set[str] = set()
        self._records = 0
        self._replay()
        if self._records > COMPACT_RATIO * max(1, self._live_records()):
            self._rewrite()
        self._fd = os.open(
            self._path, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o600
        )

    # -- recovery -----------------------------------------------------------

    def _replay(self) -> None:
        if not self._path.exists():
            return
        good_end = 0
        with open(self._path, "rb") as fh:
            for record, end in wire.iter_records(fh):
                self._fold(record)
                good_end = end
                self._records += 1
        size = self._path.stat().st_size
        if good_end < size:
            logger.warning("outbox tail torn at %d of %d bytes", good_end, size)
            with open(self._path, "r+b") as fh:
                fh.truncate(good_end)

    def _fold(self, record: dict[str, Any]) -> None:
        kind = record.get("kind")
        tid = record.get("task_id")
        if kind == "result":
            entry = self._entries.setdefault(tid, _Entry())
            entry.pending.append(
                PendingResult(
                    seq=record["seq"],
                    value=record["value"],
                    produced_at=record["produced_at"],
                )
            )
            entry.payload_id = record.get("payload_id", entry.payload_id)
            entry.parameters_id = record.get("parameters_id", entry.parameters_id)
        elif kind == "status":
            entry = self._entries.setdefault(tid, _Entry())
            entry.status = PendingStatus(
                status=TaskStatus(record["status"]), error_log=record["error_log"]
            )
            entry.payload_id = record.get("payload_id", entry.payload_id)
            entry.parameters_id = record.get("parameters_id", entry.parameters_id)
        elif kind == "trim":
            entry = self._entries.get(tid)
            if entry is not None and record["confirmed"] > entry.submitted:
                entry.submitted = record["confirmed"]
                entry.pending = [
                    r for r in entry.pending if r.seq >= entry.submitted
                ]
        elif kind == "drop":
            self._entries.pop(tid, None)
            self._dropped.add(tid)
        else:
            logger.warning("skipping unknown outbox record %r", kind)

    def _live_records(self) -> int:
        return sum(
            len(e.pending) + (1 if e.status else 0) + 1
            for e in self._entries.values()
        )

    def _rewrite(self) -> None:
        tmp = self._path.with_suffix(".tmp")
        with open(tmp, "wb") as fh:
            for tid, entry in sorted(self._entries.items()):
                for pending in entry.pending:
                    fh.write(wire.pack_record(self._result_record(tid, entry, pending)))
                if entry.status is not None:
                    fh.write(wire.pack_record(self._status_record(tid, entry)))
                if entry.submitted:
                    fh.write(
                        wire.pack_record(
                            {"kind": "trim", "task_id": tid, "confirmed": entry.submitted}
                        )
                    )
            fh.flush()
            os.fsync(fh.fileno())
        tmp.replace(self._path)
        self._records = self._live_records()
        logger.info("outbox compacted to %d records", self._records)

    @staticmethod
    def _result_record(tid: str, entry: _Entry, pending: PendingResult) -> dict:
        return {
            "kind": "result",
            "task_id": tid,
            "seq": pending.seq,
            "value": pending.value,
            "produced_at": pending.produced_at,
            "payload_id": entry.payload_id,
            "parameters_id": entry.parameters_id,
        }

    @staticmethod
    def _status_record(tid: str, entry: _Entry) -> dict:
        return {
            "kind": "status",
            "task_id": tid,
            "status": entry.status.status.value,
            "error_log": entry.status.error_log,
            "payload_id": entry.payload_id,
            "parameters_id": entry.parameters_id,
        }

    # -- writes -------------------------------------------------------------

    def _write(self, record: dict[str, Any]) -> None:
        os.write(self._fd, wire.pack_record(record))
        if self._fsync:
            os.fsync(self._fd)
        self._records += 1

    def note_task(self, task_id: str, payload_id: str, parameters_id: str | None) -> None:
        """Remember which payload a task runs; reused after restarts."""
        with self._lock:
            if task_id in self._dropped:
                return
            entry = self._entries.setdefault(task_id, _Entry())
            entry.payload_id = payload_id
            entry.parameters_id = parameters_id

    def append_result(self, task_id: str, value: Any, produced_at: int) -> int:
        """Allocate the next seq, persist, return the seq."""
        with self._lock:
            if task_id in self._dropped:
                raise ClosedTask(task_id)
            entry = self._entries.setdefault(task_id, _Entry())
            seq = entry.submitted + len(entry.pending)
            pending = PendingResult(seq=seq, value=value, produced_at=produced_at)
            self._write(self._result_record(task_id, entry, pending))
            entry.pending.append(pending)
            return seq

    def append_status(self, task_id: str, status: TaskStatus, error_log: str = "") -> None:
        with self._lock:
            if task_id in self._dropped:
                raise ClosedTask(task_id)
            entry = self._entries.setdefault(task_id, _Entry())
            entry.status = PendingStatus(status=status, error_log=error_log)
            self._write(self._status_record(task_id, entry))

    def trim(self, task_id: str, confirmed: int) -> None:
        """The server holds ``confirmed`` results for this task."""
        with self._lock:
            entry = self._entries.get(task_id)
            if entry is None or confirmed <= entry.submitted:
                return
            self._write({"kind": "trim", "task_id": task_id, "confirmed": confirmed})
            entry.submitted = confirmed
            entry.pending = [r for r in entry.pending if r.seq >= confirmed]

    def drop(self, task_id: str) -> None:
        with self._lock:
            if task_id in self._dropped and task_id not in self._entries:
                return
            self._write({"kind": "drop", "task_id": task_id})
            self._entries.pop(task_id, None)
            self._dropped.add(task_id)

    # -- reads --------------------------------------------------------------

    def local_tasks(self) -> dict[str, LocalTask]:
        """Rebuild the sync loop's local map from the log, for startup."""
        with self._lock:
            return {
                tid: LocalTask(
                    task_id=tid,
                    payload_id=entry.payload_id,
                    parameters_id=entry.parameters_id,
                    pending_results=list(entry.pending),
                    pending_status=entry.status,
                    submitted_count=entry.submitted,
                    running=False,
                )
                for tid, entry in self._entries.items()
            }

    def pending_count(self, task_id: str) -> int:
        with self._lock:
            entry = self._entries.get(task_id)
            return 0 if entry is None else len(entry.pending)

    def next_seq(self, task_id: str) -> int:
        with self._lock:
            entry = self._entries.get(task_id)
            return 0 if entry is None else entry.submitted + len(entry.pending)

    def close(self) -> None:
        with self._lock:
            if self._fd is not None:
                os.close(self._fd)
                self._fd = None
