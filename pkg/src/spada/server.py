"""Stateless request handlers: every RPC method in one place.

A ServerNode owns no session state.  Everything it knows lives in the
store and on the bus, so any number of nodes can front the same store
and requests can land on any of them.  Handlers validate, call the
store, publish notifications for applied mutations, and return wire
shapes.

Authentication is a static token registry with two roles.  A "client"
token authorizes the agent-facing methods, a "user" token the
user-facing ones.  This is a stand-in seam for a real credential
system; swapping it out does not touch the handlers.
"""

from __future__ import annotations

import collections
import hmac
import logging
from typing import Any

from .bus import InProcessBus, assignment_topic
from .model import (
    AssignmentDoc,
    ModelError,
    ParametersDoc,
    PayloadDoc,
    TaskDoc,
    TaskStatus,
    check_client_id,
)
from .rpc import (
    ERR_FAILED_PRECONDITION,
    ERR_INVALID_ARGUMENT,
    ERR_NOT_FOUND,
    ERR_UNAUTHENTICATED,
    RpcError,
)
from .store import (
    AppendOutcome,
    BadCommit,
    BadQuery,
    CommitBatch,
    MemoryStore,
    StatusOutcome,
    StoreError,
    UnknownClient,
    UnknownDocument,
)

logger = logging.getLogger(__name__)

ROLE_CLIENT = "client"
ROLE_USER = "user"

_CLIENT_METHODS = frozenset(
    {"register_client", "fetch_state", "submit", "get_payload", "get_parameters"}
)
_USER_METHODS = frozenset(
    {"user_commit", "user_cancel", "user_query", "get_payload", "get_parameters"}
)


class TokenRegistry:
    """Static token -> role table with constant-time comparison."""

    def __init__(self, tokens: dict[str, str]) -> None:
        for role in tokens.values():
            if role not in (ROLE_CLIENT, ROLE_USER):
                raise ValueError(f"unknown role {role!r}")
        self._tokens = dict(tokens)

    def role_of(self, presented: str) -> str | None:
        for token, role in self._tokens.items():
            if hmac.compare_digest(token, presented):
                return role
        return None


class ServerNode:
    def __init__(
        self, store: MemoryStore, bus: InProcessBus, tokens: TokenRegistry
    ) -> None:
        self.store = store
        self.bus = bus
        self.tokens = tokens
        # Method call counters, exposed for tests and debugging.
        self.metrics: collections.Counter[str] = collections.Counter()

    # -- dispatch -----------------------------------------------------------

    def handle(self, method: str, params: dict[str, Any], token: str) -> dict[str, Any]:
        role = self.tokens.role_of(token)
        if role is None:
            raise RpcError(ERR_UNAUTHENTICATED, "unknown token")
        allowed = _CLIENT_METHODS if role == ROLE_CLIENT else _USER_METHODS
        if method not in allowed:
            if method in _CLIENT_METHODS | _USER_METHODS:
                raise RpcError(ERR_UNAUTHENTICATED, f"role {role} cannot call {method}")
            raise RpcError(ERR_INVALID_ARGUMENT, f"unknown method {method!r}")
        self.metrics[method] += 1
        handler = getattr(self, f"_h_{method}")
        try:
            return handler(params)
        except RpcError:
            raise
        except (ModelError, BadCommit, BadQuery) as exc:
            raise RpcError(ERR_INVALID_ARGUMENT, str(exc)) from exc
        except UnknownClient as exc:
            raise RpcError(ERR_NOT_FOUND, f"unknown client {exc}") from exc
        except UnknownDocument as exc:
            raise RpcError(ERR_NOT_FOUND, str(exc)) from exc
        except StoreError as exc:
            raise RpcError(ERR_INVALID_ARGUMENT, str(exc)) from exc

    # -- client-facing methods ----------------------------------------------

    def _h_register_client(self, params: dict[str, Any]) -> dict[str, Any]:
        client_id = check_client_id(params.get("client_id"))
        created = self.store.register_client(client_id)
        return {"created": created}

    def _h_fetch_state(self, params: dict[str, Any]) -> dict[str, Any]:
        client_id = check_client_id(params.get("client_id"))
        return self.store.fetch_client_state(client_id).to_wire()

    def _h_submit(self, params: dict[str, Any]) -> dict[str, Any]:
        client_id = check_client_id(params.get("client_id"))
        results = params.get("results", [])
        statuses = params.get("statuses", [])
        if not isinstance(results, list) or not isinstance(statuses, list):
            raise RpcError(ERR_INVALID_ARGUMENT, "results/statuses must be lists")
        for item in results:
            self._apply_result(client_id, item)
        for item in statuses:
            self._apply_status(client_id, item)
        return self.store.fetch_client_state(client_id).to_wire()

    def _apply_result(self, client_id: str, item: Any) -> None:
        if (
            not isinstance(item, dict)
            or not isinstance(item.get("task_id"), str)
            or not isinstance(item.get("seq"), int)
            or isinstance(item.get("seq"), bool)
        ):
            raise RpcError(ERR_INVALID_ARGUMENT, "malformed result entry")
        task = self.store.get_task(item["task_id"])
        if task is not None and task.client_id != client_id:
            logger.warning(
                "client %s submitted result for foreign task %s", client_id, item["task_id"]
            )
            return
        outcome = self.store.append_result(
            item["task_id"],
            item["seq"],
            item.get("value"),
            int(item.get("produced_at", 0)),
        )
        if outcome.outcome is AppendOutcome.APPENDED:
            self.bus.publish_clock(client_id, outcome.new_ts)
            self.bus.publish_event(
                assignment_topic(outcome.assignment_id),
                {
                    "kind": "result",
                    "task_id": item["task_id"],
                    "seq": item["seq"],
                    "value": item.get("value"),
                },
            )
        elif outcome.outcome is AppendOutcome.REJECTED:
            logger.warning(
                "rejected result %s/%d: %s", item["task_id"], item["seq"], outcome.reason
            )

    def _apply_status(self, client_id: str, item: Any) -> None:
        if not isinstance(item, dict) or not isinstance(item.get("task_id"), str):
            raise RpcError(ERR_INVALID_ARGUMENT, "malformed status entry")
        try:
            to = TaskStatus(item.get("status"))
        except ValueError as exc:
            raise RpcError(ERR_INVALID_ARGUMENT, f"unknown status {item.get('status')!r}") from exc
        if not to.terminal:
            raise RpcError(ERR_INVALID_ARGUMENT, "clients may only report terminal statuses")
        task = self.store.get_task(item["task_id"])
        if task is None:
            logger.warning("status for unknown task %s dropped", item["task_id"])
            return
        if task.client_id != client_id:
            logger.warning(
                "client %s submitted status for foreign task %s", client_id, item["task_id"]
            )
            return
        outcome = self.store.set_status(
            item["task_id"], to, item.get("error_log", "") or ""
        )
        if outcome.outcome is StatusOutcome.APPLIED:
            self.bus.publish_clock(client_id, outcome.new_ts)
            self.bus.publish_event(
                assignment_topic(outcome.assignment_id),
                {"kind": "status", "task_id": item["task_id"], "status": to.value},
            )

    def _h_get_payload(self, params: dict[str, Any]) -> dict[str, Any]:
        doc = self.store.get_payload(str(params.get("payload_id")))
        if doc is None:
            raise RpcError(ERR_NOT_FOUND, "no such payload")
        return {"payload": doc.to_wire()}

    def _h_get_parameters(self, params: dict[str, Any]) -> dict[str, Any]:
        doc = self.store.get_parameters(str(params.get("parameters_id")))
        if doc is None:
            raise RpcError(ERR_NOT_FOUND, "no such parameters")
        return {"parameters": doc.to_wire()}

    # -- user-facing methods ------------------------------------------------

    def _h_user_commit(self, params: dict[str, Any]) -> dict[str, Any]:
        def docs(key: str, cls) -> list:
            raw = params.get(key, [])
            if not isinstance(raw, list):
                raise RpcError(ERR_INVALID_ARGUMENT, f"{key} must be a list")
            return [cls.from_wire(d) for d in raw]

        try:
            batch = CommitBatch(
                payloads=docs("payloads", PayloadDoc),
                parameters=docs("parameters", ParametersDoc),
                tasks=docs("tasks", TaskDoc),
                assignments=docs("assignments", AssignmentDoc),
            )
        except (KeyError, TypeError) as exc:
            raise RpcError(ERR_INVALID_ARGUMENT, f"malformed document: {exc}") from exc
        outcome = self.store.commit_documents(batch)
        for client_id, ts in sorted(outcome.clock_updates.items()):
            self.bus.publish_clock(client_id, ts)
        return {
            "payload_ids": outcome.payload_ids,
            "parameters_ids": outcome.parameters_ids,
            "task_ids": outcome.task_ids,
            "assignment_ids": outcome.assignment_ids,
            "replayed": outcome.replayed,
        }

    def _h_user_cancel(self, params: dict[str, Any]) -> dict[str, Any]:
        task_id = params.get("task_id")
        if not isinstance(task_id, str):
            raise RpcError(ERR_INVALID_ARGUMENT, "task_id must be a string")
        task = self.store.get_task(task_id)
        if task is None:
            raise RpcError(ERR_NOT_FOUND, "no such task")
        outcome = self.store.set_status(task_id, TaskStatus.CANCELED)
        if outcome.outcome is StatusOutcome.IGNORED:
            raise RpcError(
                ERR_FAILED_PRECONDITION,
                f"task is already {self.store.get_task(task_id).status.value}",
            )
        self.bus.publish_clock(task.client_id, outcome.new_ts)
        self.bus.publish_event(
            assignment_topic(outcome.assignment_id),
            {"kind": "status", "task_id": task_id, "status": TaskStatus.CANCELED.value},
        )
        return {"task_id": task_id, "status": TaskStatus.CANCELED.value}

    def _h_user_query(self, params: dict[str, Any]) -> dict[str, Any]:
        flt = params.get("filter")
        if not isinstance(flt, dict):
            raise RpcError(ERR_INVALID_ARGUMENT, "filter must be an object")
        return {"rows": self.store.query(flt)}
