"""Core document model shared by every component of the platform.

Five document kinds flow through the system: payloads (code), parameters
(configuration trees), tasks (one payload scheduled on one client),
assignments (groups of tasks) and result records (sequenced task output).
Everything here is plain data with validation; no I/O, no clocks, no
policy.  Other modules import these types rather than re-declaring wire
shapes ad hoc.
"""

from __future__ import annotations

import math
import re
import secrets
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable

__all__ = [
    "AssignmentDoc",
    "ClientStateSnapshot",
    "ERROR_LOG_CAP",
    "MAX_CLIENT_ID_LEN",
    "MAX_NAME_LEN",
    "MAX_PAYLOAD_BYTES",
    "ModelError",
    "ParametersDoc",
    "PayloadDoc",
    "ResultRecord",
    "TaskDoc",
    "TaskStatus",
    "TaskSummary",
    "check_client_id",
    "check_tree_value",
    "clip_error_log",
    "is_document_id",
    "new_document_id",
    "require_document_id",
]

# Identifier and size limits enforced at construction time.
DOCUMENT_ID_BYTES = 16
MAX_CLIENT_ID_LEN = 128
MAX_NAME_LEN = 256
MAX_PAYLOAD_BYTES = 8 * 1024 * 1024
ERROR_LOG_CAP = 64 * 1024

_DOCUMENT_ID_RE = re.compile(r"^[0-9a-f]{32}$")


class ModelError(ValueError):
    """A document or field failed validation."""


class TaskStatus(str, Enum):
    """Lifecycle of a task.

    ACTIVE is the only non-terminal status.  The three terminal statuses
    are absorbing: no transition leaves them, and re-asserting the same
    terminal status is treated as an idempotent no-op by callers, not as
    a transition.
    """

    ACTIVE = "ACTIVE"
    FINISHED = "FINISHED"
    ERROR = "ERROR"
    CANCELED = "CANCELED"

    @property
    def terminal(self) -> bool:
        return self is not TaskStatus.ACTIVE


_ALLOWED_TRANSITIONS = frozenset(
    {
        (TaskStatus.ACTIVE, TaskStatus.FINISHED),
        (TaskStatus.ACTIVE, TaskStatus.ERROR),
        (TaskStatus.ACTIVE, TaskStatus.CANCELED),
    }
)


def validate_transition(current: TaskStatus, proposed: TaskStatus) -> bool:
    """Return True when ``current -> proposed`` is a legal status change.

    Self-transitions are not legal changes; idempotent handling of a
    repeated terminal status is the caller's concern.
    """
    return (current, proposed) in _ALLOWED_TRANSITIONS


def new_document_id(randbytes: Callable[[int], bytes] | None = None) -> str:
    """Mint a fresh 128-bit document id as 32 lowercase hex characters.

    ``randbytes`` may be injected for deterministic tests; it must yield
    at least 16 bytes or the id cannot be formed.
    """
    source = randbytes if randbytes is not None else secrets.token_bytes
    raw = source(DOCUMENT_ID_BYTES)
    if len(raw) < DOCUMENT_ID_BYTES:
        raise ModelError(
            f"entropy source returned {len(raw)} bytes, need {DOCUMENT_ID_BYTES}"
        )
    return raw[:DOCUMENT_ID_BYTES].hex()


def is_document_id(value: object) -> bool:
    return isinstance(value, str) and _DOCUMENT_ID_RE.match(value) is not None


def require_document_id(value: object, what: str = "document id") -> str:
    if not is_document_id(value):
        raise ModelError(f"{what} must be 32 lowercase hex characters, got {value!r}")
    return value  # type: ignore[return-value]


def check_client_id(value: object) -> str:
    if not isinstance(value, str) or not value:
        raise ModelError("client id must be a non-empty string")
    if len(value) > MAX_CLIENT_ID_LEN:
        raise ModelError(f"client id longer than {MAX_CLIENT_ID_LEN} characters")
    return value


def check_tree_value(value: Any, what: str = "value") -> Any:
    """Validate a JSON tree: null/bool/finite number/string/list/dict.

    Dict keys must be strings.  NaN and infinities are rejected rather
    than silently producing non-interoperable JSON.
    """
    if value is None or isinstance(value, (bool, str, int)):
        return value
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ModelError(f"{what} contains a non-finite number")
        return value
    if isinstance(value, list):
        for item in value:
            check_tree_value(item, what)
        return value
    if isinstance(value, dict):
        for key, item in value.items():
            if not isinstance(key, str):
                raise ModelError(f"{what} has a non-string object key: {key!r}")
            check_tree_value(item, what)
        return value
    raise ModelError(f"{what} has unsupported type {type(value).__name__}")


def clip_error_log(text: str) -> str:
    """Keep the tail of an error log, bounded at ERROR_LOG_CAP bytes.

    The tail is kept because the last lines of a crashing container are
    the ones worth reading.
    """
    raw = text.encode("utf-8", errors="replace")
    if len(raw) <= ERROR_LOG_CAP:
        return text
    clipped = raw[-ERROR_LOG_CAP:]
    return clipped.decode("utf-8", errors="replace")


def _check_name(name: str) -> str:
    if not isinstance(name, str) or not name:
        raise ModelError("name must be a non-empty string")
    if len(name) > MAX_NAME_LEN:
        raise ModelError(f"name longer than {MAX_NAME_LEN} characters")
    return name


@dataclass(slots=True)
class PayloadDoc:
    """Executable source shipped to clients, immutable once committed."""

    id: str
    name: str
    body: str
    created_at: int = 0

    def __post_init__(self) -> None:
        require_document_id(self.id, "payload id")
        _check_name(self.name)
        if not isinstance(self.body, str) or not self.body:
            raise ModelError("payload body must be non-empty source text")
        if len(self.body.encode("utf-8")) > MAX_PAYLOAD_BYTES:
            raise ModelError(f"payload body exceeds {MAX_PAYLOAD_BYTES} bytes")

    def to_wire(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "name": self.name,
            "body": self.body,
            "created_at": self.created_at,
        }

    @classmethod
    def from_wire(cls, raw: dict[str, Any]) -> "PayloadDoc":
        return cls(
            id=raw["id"],
            name=raw["name"],
            body=raw["body"],
            created_at=int(raw.get("created_at", 0)),
        )


@dataclass(slots=True)
class ParametersDoc:
    """A JSON configuration tree handed to a payload at start."""

    id: str
    value: Any
    created_at: int = 0

    def __post_init__(self) -> None:
        require_document_id(self.id, "parameters id")
        check_tree_value(self.value, "parameters value")

    def to_wire(self) -> dict[str, Any]:
        return {"id": self.id, "value": self.value, "created_at": self.created_at}

    @classmethod
    def from_wire(cls, raw: dict[str, Any]) -> "ParametersDoc":
        return cls(
            id=raw["id"],
            value=raw["value"],
            created_at=int(raw.get("created_at", 0)),
        )


@dataclass(slots=True)
class TaskDoc:
    """One payload scheduled on one client, with a lifecycle status."""

    id: str
    assignment_id: str
    client_id: str
    payload_id: str
    parameters_id: str | None
    status: TaskStatus = TaskStatus.ACTIVE
    result_count: int = 0
    error_log: str = ""
    created_at: int = 0
    terminal_at: int | None = None

    def __post_init__(self) -> None:
        require_document_id(self.id, "task id")
        require_document_id(self.assignment_id, "assignment id")
        check_client_id(self.client_id)
        require_document_id(self.payload_id, "payload id")
        if self.parameters_id is not None:
            require_document_id(self.parameters_id, "parameters id")
        if not isinstance(self.status, TaskStatus):
            self.status = TaskStatus(self.status)
        if self.result_count < 0:
            raise ModelError("result_count cannot be negative")

    def to_wire(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "assignment_id": self.assignment_id,
            "client_id": self.client_id,
            "payload_id": self.payload_id,
            "parameters_id": self.parameters_id,
            "status": self.status.value,
            "result_count": self.result_count,
            "error_log": self.error_log,
            "created_at": self.created_at,
            "terminal_at": self.terminal_at,
        }

    @classmethod
    def from_wire(cls, raw: dict[str, Any]) -> "TaskDoc":
        return cls(
            id=raw["id"],
            assignment_id=raw["assignment_id"],
            client_id=raw["client_id"],
            payload_id=raw["payload_id"],
            parameters_id=raw.get("parameters_id"),
            status=TaskStatus(raw.get("status", "ACTIVE")),
            result_count=int(raw.get("result_count", 0)),
            error_log=raw.get("error_log", ""),
            created_at=int(raw.get("created_at", 0)),
            terminal_at=raw.get("terminal_at"),
        )


@dataclass(slots=True)
class AssignmentDoc:
    """A named group of tasks committed together and tracked together."""

    id: str
    name: str
    task_ids: list[str] = field(default_factory=list)
    created_at: int = 0

    def __post_init__(self) -> None:
        require_document_id(self.id, "assignment id")
        _check_name(self.name)
        seen: set[str] = set()
        for task_id in self.task_ids:
            require_document_id(task_id, "task id")
            if task_id in seen:
                raise ModelError(f"assignment lists task {task_id} twice")
            seen.add(task_id)

    def to_wire(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "name": self.name,
            "task_ids": list(self.task_ids),
            "created_at": self.created_at,
        }

    @classmethod
    def from_wire(cls, raw: dict[str, Any]) -> "AssignmentDoc":
        return cls(
            id=raw["id"],
            name=raw["name"],
            task_ids=list(raw.get("task_ids", [])),
            created_at=int(raw.get("created_at", 0)),
        )


@dataclass(slots=True)
class ResultRecord:
    """One sequenced output value published by a task.

    ``seq`` is assigned client-side and is contiguous from zero per
    task; the server uses it to deduplicate redelivered results.
    """

    task_id: str
    seq: int
    value: Any
    produced_at: int
    recorded_at: int = 0

    def __post_init__(self) -> None:
        require_document_id(self.task_id, "task id")
        if self.seq < 0:
            raise ModelError("result seq cannot be negative")
        check_tree_value(self.value, "result value")

    def to_wire(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "seq": self.seq,
            "value": self.value,
            "produced_at": self.produced_at,
            "recorded_at": self.recorded_at,
        }

    @classmethod
    def from_wire(cls, raw: dict[str, Any]) -> "ResultRecord":
        return cls(
            task_id=raw["task_id"],
            seq=int(raw["seq"]),
            value=raw["value"],
            produced_at=int(raw["produced_at"]),
            recorded_at=int(raw.get("recorded_at", 0)),
        )


@dataclass(slots=True)
class TaskSummary:
    """The slice of a task a client needs in order to run it."""

    task_id: str
    payload_id: str
    parameters_id: str | None
    result_count: int

    def to_wire(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "payload_id": self.payload_id,
            "parameters_id": self.parameters_id,
            "result_count": self.result_count,
        }

    @classmethod
    def from_wire(cls, raw: dict[str, Any]) -> "TaskSummary":
        return cls(
            task_id=raw["task_id"],
            payload_id=raw["payload_id"],
            parameters_id=raw.get("parameters_id"),
            result_count=int(raw.get("result_count", 0)),
        )


@dataclass(slots=True)
class ClientStateSnapshot:
    """A client's view of the server: logical clock plus active tasks."""

    ts: int
    tasks: list[TaskSummary] = field(default_factory=list)

    def to_wire(self) -> dict[str, Any]:
        return {"ts": self.ts, "tasks": [t.to_wire() for t in self.tasks]}

    @classmethod
    def from_wire(cls, raw: dict[str, Any]) -> "ClientStateSnapshot":
        return cls(
            ts=int(raw["ts"]),
            tasks=[TaskSummary.from_wire(t) for t in raw.get("tasks", [])],
        )
