"""User-side library: drafts, commits, cancelation, result retrieval.

Documents are drafted locally with their final ids already assigned, so
a whole graph (payload, parameters, tasks, assignment) goes to the
server as one atomic commit.  The handles chain:

    user = User.from_config("user.json")
    payload = user.payload(Path("mean.py").read_text(), name="Average")
    tasks = [user.task(c, payload, params) for c in clients]
    report = user.assignment("Mean speed", tasks).commit().await_results()

Results arrive through the notification bus when it is healthy and are
reconciled against the server's query endpoint either way, so a missed
notification can delay a wakeup but never corrupt what is returned.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Any, Iterator

from .bus import BusClient, assignment_topic
from .config import UserConfig, load_user_config
from .model import check_tree_value, new_document_id
from .rpc import RpcClient, RpcError

logger = logging.getLogger(__name__)

KIND_PAYLOAD = "payload"
KIND_PARAMETERS = "parameters"
KIND_TASK = "task"
KIND_ASSIGNMENT = "assignment"


class SdkError(ValueError):
    """Misused draft surface (server-side failures raise RpcError)."""


@dataclass
class Draft:
    """A document with its id fixed at creation and a committed flag."""

    kind: str
    content: dict[str, Any]
    user: "User"
    id: str = field(default_factory=new_document_id)
    committed: bool = False
    refs: list["Draft"] = field(default_factory=list)

    def commit(self) -> "Draft":
        self.user._commit_draft(self)
        return self

    # Result access only makes sense on assignments; delegating from
    # the draft keeps the chain readable.

    def await_results(self, timeout: float | None = None) -> "AwaitReport":
        self._require_committed_assignment("await_results")
        return self.user.await_assignment(self.id, timeout=timeout)

    def stream(self) -> Iterator[dict[str, Any]]:
        self._require_committed_assignment("stream")
        return self.user.stream_assignment(self.id)

    def _require_committed_assignment(self, what: str) -> None:
        if self.kind != KIND_ASSIGNMENT:
            raise SdkError(f"{what} applies to assignments, not {self.kind}s")
        if not self.committed:
            raise SdkError(f"commit the assignment before calling {what}")


@dataclass(slots=True)
class TaskReport:
    task_id: str
    status: str
    results: list[Any]
    error_log: str = ""


@dataclass(slots=True)
class AwaitReport:
    """Final (or timed-out partial) view of one assignment's tasks."""

    tasks: dict[str, TaskReport]
    timed_out: bool = False

    def all_finished(self) -> bool:
        return not self.timed_out and all(
            t.status == "FINISHED" for t in self.tasks.values()
        )


def _ref_id(ref: "Draft | str | None", kind: str) -> str | None:
    if ref is None:
        return None
    if isinstance(ref, Draft):
        if ref.kind != kind:
            raise SdkError(f"expected a {kind} reference, got {ref.kind}")
        return ref.id
    return ref


class User:
    def __init__(self, config: UserConfig) -> None:
        self._config = config
        self._rpc = RpcClient(config.server_addr, config.token)

    @classmethod
    def from_config(cls, path: str | None = None) -> "User":
        return cls(load_user_config(path))

    def close(self) -> None:
        self._rpc.close()

    def __enter__(self) -> "User":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- drafting ------------------------------------------------------------

    def payload(self, source: str, name: str) -> Draft:
        if not source:
            raise SdkError("payload body must not be empty")
        return Draft(KIND_PAYLOAD, {"name": name, "body": source}, self)

    def parameters(self, value: Any) -> Draft:
        check_tree_value(value)
        return Draft(KIND_PARAMETERS, {"value": value}, self)

    def task(
        self,
        client: str,
        payload: Draft | str,
        parameters: Draft | str | None = None,
    ) -> Draft:
        content = {
            "client_id": client,
            "payload_id": _ref_id(payload, KIND_PAYLOAD),
            "parameters_id": _ref_id(parameters, KIND_PARAMETERS),
        }
        refs = [r for r in (payload, parameters) if isinstance(r, Draft)]
        return Draft(KIND_TASK, content, self, refs=refs)

    def assignment(self, name: str, tasks: list[Draft]) -> Draft:
        for task in tasks:
            if not isinstance(task, Draft) or task.kind != KIND_TASK:
                raise SdkError("assignment takes task drafts")
        content = {"name": name, "task_ids": [t.id for t in tasks]}
        return Draft(KIND_ASSIGNMENT, content, self, refs=list(tasks))

    # -- committing ----------------------------------------------------------

    def _commit_draft(self, draft: Draft) -> None:
        if draft.committed:
            return
        if draft.kind == KIND_TASK:
            raise SdkError("tasks are committed through their assignment")
        keys = {
            KIND_PAYLOAD: "payloads",
            KIND_PARAMETERS: "parameters",
            KIND_TASK: "tasks",
            KIND_ASSIGNMENT: "assignments",
        }
        batch: dict[str, list[dict[str, Any]]] = {k: [] for k in keys.values()}
        drafts = self._collect(draft, [])
        for item in drafts:
            entry = dict(item.content)
            entry["id"] = item.id
            if item.kind == KIND_TASK:
                entry["assignment_id"] = draft.id
                entry["status"] = "ACTIVE"
                entry["result_count"] = 0
            batch[keys[item.kind]].append(entry)
        self._rpc.call("user_commit", batch)
        for item in drafts:
            item.committed = True

    def _collect(self, draft: Draft, out: list[Draft]) -> list[Draft]:
        for ref in draft.refs:
            self._collect(ref, out)
        if not draft.committed and draft not in out:
            out.append(draft)
        return out

    # -- queries and control ---------------------------------------------------

    def get_clients(self, online_only: bool = False) -> list[dict[str, Any]]:
        return self.query({"kind": "clients", "online_only": online_only})

    def query(self, flt: dict[str, Any]) -> list[dict[str, Any]]:
        return self._rpc.call("user_query", {"filter": flt})["rows"]

    def cancel(self, task: Draft | str) -> dict[str, Any]:
        task_id = task.id if isinstance(task, Draft) else task
        return self._rpc.call("user_cancel", {"task_id": task_id})

    # -- results ---------------------------------------------------------------

    def _assignment_tasks(self, assignment_id: str) -> list[dict[str, Any]]:
        return self.query({"kind": "tasks", "assignment_id": assignment_id})

    def _report(self, assignment_id: str) -> dict[str, TaskReport]:
        report = {}
        for row in self._assignment_tasks(assignment_id):
            results = self.query({"kind": "results", "task_id": row["id"]})
            report[row["id"]] = TaskReport(
                task_id=row["id"],
                status=row["status"],
                results=[r["value"] for r in results],
                error_log=row.get("error_log", ""),
            )
        return report

    def await_assignment(
        self, assignment_id: str, timeout: float | None = None
    ) -> AwaitReport:
        """Block until every task of the assignment is terminal.

        The returned report is always rebuilt from the server, so it
        matches a direct query even if bus notifications were lost; the
        bus only decides how quickly the next check happens.
        """
        deadline = None if timeout is None else time.monotonic() + timeout
        sub = self._try_subscribe(assignment_id)
        try:
            while True:
                rows = self._assignment_tasks(assignment_id)
                if rows and all(r["status"] != "ACTIVE" for r in rows):
                    return AwaitReport(tasks=self._report(assignment_id))
                if not rows:
                    # Zero-task assignments have nothing to wait for.
                    if self.query(
                        {"kind": "assignments", "assignment_id": assignment_id}
                    ):
                        return AwaitReport(tasks={})
                    raise RpcError("not-found", "no such assignment")
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return AwaitReport(
                        tasks=self._report(assignment_id), timed_out=True
                    )
                if sub is None:
                    sub = self._try_subscribe(assignment_id)
                pause = 0.5 if remaining is None else min(0.5, remaining)
                if sub is not None:
                    if self._wait_frame(sub, pause) is None and sub.closed:
                        sub = None
                else:
                    time.sleep(pause)
        finally:
            if sub is not None:
                sub.close()

    def stream_assignment(self, assignment_id: str) -> Iterator[dict[str, Any]]:
        """Yield result/status events until every task is terminal.

        History already on the server is synthesized from queries (the
        bus retains no events), then live frames take over; after a
        disconnect the gap is filled the same way.
        """
        seen_results: set[tuple[str, int]] = set()
        seen_status: dict[str, str] = {}
        sub = self._try_subscribe(assignment_id)
        while True:
            yield from self._catch_up(assignment_id, seen_results, seen_status)
            rows = self._assignment_tasks(assignment_id)
            if not rows and not self.query(
                {"kind": "assignments", "assignment_id": assignment_id}
            ):
                raise RpcError("not-found", "no such assignment")
            if all(r["status"] != "ACTIVE" for r in rows):
                if sub is not None:
                    sub.close()
                return
            if sub is None or sub.closed:
                time.sleep(0.5)
                sub = self._try_subscribe(assignment_id)
                continue
            frame = self._wait_frame(sub, 0.5)
            if frame is None:
                continue
            event = frame.get("event")
            if not isinstance(event, dict):
                continue
            if event.get("kind") == "result":
                key = (event.get("task_id"), event.get("seq"))
                if key in seen_results:
                    continue
                seen_results.add(key)
                yield event
            elif event.get("kind") == "status":
                tid = event.get("task_id")
                if seen_status.get(tid) == event.get("status"):
                    continue
                seen_status[tid] = event.get("status")
                yield event

    def _catch_up(
        self,
        assignment_id: str,
        seen_results: set[tuple[str, int]],
        seen_status: dict[str, str],
    ) -> Iterator[dict[str, Any]]:
        for row in self._assignment_tasks(assignment_id):
            tid = row["id"]
            for record in self.query({"kind": "results", "task_id": tid}):
                key = (tid, record["seq"])
                if key in seen_results:
                    continue
                seen_results.add(key)
                yield {
                    "kind": "result",
                    "task_id": tid,
                    "seq": record["seq"],
                    "value": record["value"],
                }
            if row["status"] != "ACTIVE" and seen_status.get(tid) != row["status"]:
                seen_status[tid] = row["status"]
                yield {"kind": "status", "task_id": tid, "status": row["status"]}

    # -- bus plumbing ----------------------------------------------------------

    def _try_subscribe(self, assignment_id: str):
        try:
            client = _Subscriber(self._config.bus_addr)
            client.subscribe(assignment_topic(assignment_id))
            return client
        except OSError as exc:
            logger.debug("bus unreachable (%s); falling back to polling", exc)
            return None

    @staticmethod
    def _wait_frame(sub: "_Subscriber", timeout: float) -> dict[str, Any] | None:
        return sub.next_frame(timeout)


class _Subscriber:
    """BusClient with a pump thread so reads can time out."""

    def __init__(self, addr: str) -> None:
        import queue
        import threading

        self._client = BusClient(addr)
        self._frames: "queue.Queue[dict[str, Any]]" = queue.Queue()
        self.closed = False
        self._thread = threading.Thread(target=self._pump, daemon=True)
        self._thread.start()

    def subscribe(self, topic: str) -> None:
        self._client.subscribe(topic)

    def _pump(self) -> None:
        for frame in self._client.frames():
            self._frames.put(frame)
        self.closed = True

    def next_frame(self, timeout: float) -> dict[str, Any] | None:
        import queue

        try:
            return self._frames.get(timeout=timeout)
        except queue.Empty:
            return None

    def close(self) -> None:
        self.closed = True
        self._client.close()


__all__ = [
    "AwaitReport",
    "Draft",
    "SdkError",
    "TaskReport",
    "User",
]
