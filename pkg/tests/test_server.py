"""Server node handlers and the framed RPC transport."""

from __future__ import annotations

import threading
import time

import pytest

from spada.bus import InProcessBus, assignment_topic, clock_topic
from spada.model import new_document_id
from spada.rpc import (
    RetryingRpcClient,
    RpcClient,
    RpcError,
    RpcServer,
    RpcTransportError,
)
from spada.server import ServerNode, TokenRegistry
from spada.store import MemoryStore

CTOK = "client-secret"
UTOK = "user-secret"


@pytest.fixture()
def node():
    store = MemoryStore(now_ms=lambda: 1_000)
    bus = InProcessBus()
    store.register_client("car-1")  # commits require a known client
    return ServerNode(store, bus, TokenRegistry({CTOK: "client", UTOK: "user"}))


def _commit_params(client="car-1", tasks=1, payload_body="pass\n"):
    payload_id = new_document_id()
    assignment_id = new_document_id()
    task_docs = [
        {
            "id": new_document_id(),
            "assignment_id": assignment_id,
            "client_id": client,
            "payload_id": payload_id,
            "parameters_id": None,
            "status": "ACTIVE",
            "result_count": 0,
        }
        for _ in range(tasks)
    ]
    return {
        "payloads": [{"id": payload_id, "name": "p", "body": payload_body}],
        "parameters": [],
        "tasks": task_docs,
        "assignments": [
            {
                "id": assignment_id,
                "name": "job",
                "task_ids": [t["id"] for t in task_docs],
            }
        ],
    }


def test_unknown_token_rejected(node):
    with pytest.raises(RpcError) as err:
        node.handle("fetch_state", {"client_id": "car-1"}, "wrong")
    assert err.value.code == "unauthenticated"


def test_role_separation(node):
    with pytest.raises(RpcError) as err:
        node.handle("user_commit", _commit_params(), CTOK)
    assert err.value.code == "unauthenticated"
    with pytest.raises(RpcError) as err:
        node.handle("submit", {"client_id": "car-1"}, UTOK)
    assert err.value.code == "unauthenticated"


def test_unknown_method_is_invalid_argument(node):
    with pytest.raises(RpcError) as err:
        node.handle("frobnicate", {}, UTOK)
    assert err.value.code == "invalid-argument"


def test_commit_publishes_retained_clock(node):
    out = node.handle("user_commit", _commit_params(), UTOK)
    assert len(out["task_ids"]) == 1
    assert not out["replayed"]
    assert node.bus.retained_clock("car-1") == 1


def test_commit_replay_is_idempotent(node):
    params = _commit_params()
    node.handle("user_commit", params, UTOK)
    again = node.handle("user_commit", params, UTOK)
    assert again["replayed"] is True
    assert node.bus.retained_clock("car-1") == 1  # no second bump


def test_commit_dangling_reference_is_invalid_argument(node):
    params = _commit_params()
    params["payloads"] = []
    with pytest.raises(RpcError) as err:
        node.handle("user_commit", params, UTOK)
    assert err.value.code == "invalid-argument"


def test_fetch_unregistered_client_not_found(node):
    with pytest.raises(RpcError) as err:
        node.handle("fetch_state", {"client_id": "ghost"}, CTOK)
    assert err.value.code == "not-found"


def test_register_then_fetch(node):
    assert node.handle("register_client", {"client_id": "car-7"}, CTOK) == {
        "created": True
    }
    assert node.handle("register_client", {"client_id": "car-7"}, CTOK) == {
        "created": False
    }
    snap = node.handle("fetch_state", {"client_id": "car-7"}, CTOK)
    assert snap == {"ts": 0, "tasks": []}


def test_submit_roundtrip_and_events(node):
    node.handle("register_client", {"client_id": "car-1"}, CTOK)
    out = node.handle("user_commit", _commit_params(tasks=2), UTOK)
    t1, t2 = out["task_ids"]
    events = node.bus.subscribe(assignment_topic(out["assignment_ids"][0]))
    snap = node.handle(
        "submit",
        {
            "client_id": "car-1",
            "results": [
                {"task_id": t1, "seq": 0, "value": {"Mean": 42.5}, "produced_at": 7}
            ],
            "statuses": [{"task_id": t2, "status": "FINISHED"}],
        },
        CTOK,
    )
    # The snapshot reflects both mutations: t2 left the active set and
    # t1 carries its new result count.
    assert [t["task_id"] for t in snap["tasks"]] == [t1]
    assert snap["tasks"][0]["result_count"] == 1
    assert snap["ts"] == 3  # commit + append + status
    ev1 = events.get(timeout=1)["event"]
    assert ev1 == {"kind": "result", "task_id": t1, "seq": 0, "value": {"Mean": 42.5}}
    ev2 = events.get(timeout=1)["event"]
    assert ev2 == {"kind": "status", "task_id": t2, "status": "FINISHED"}


def test_submit_ignores_non_active_and_duplicate(node):
    node.handle("register_client", {"client_id": "car-1"}, CTOK)
    out = node.handle("user_commit", _commit_params(), UTOK)
    tid = out["task_ids"][0]
    node.handle("user_cancel", {"task_id": tid}, UTOK)
    before = node.store.dump()
    snap = node.handle(
        "submit",
        {
            "client_id": "car-1",
            "results": [{"task_id": tid, "seq": 0, "value": 1, "produced_at": 0}],
            "statuses": [{"task_id": tid, "status": "FINISHED"}],
        },
        CTOK,
    )
    after = node.store.dump()
    # Liveness moves, nothing else does.
    before["clients"]["car-1"]["last_seen"] = after["clients"]["car-1"]["last_seen"]
    assert before == after
    assert snap["tasks"] == []
    assert node.store.get_task(tid).status.value == "CANCELED"


def test_submit_drops_foreign_task_entries(node):
    node.handle("register_client", {"client_id": "car-2"}, CTOK)
    out = node.handle("user_commit", _commit_params(client="car-1"), UTOK)
    tid = out["task_ids"][0]
    node.handle(
        "submit",
        {
            "client_id": "car-2",
            "results": [{"task_id": tid, "seq": 0, "value": 1, "produced_at": 0}],
            "statuses": [{"task_id": tid, "status": "ERROR", "error_log": "hijack"}],
        },
        CTOK,
    )
    task = node.store.get_task(tid)
    assert task.result_count == 0
    assert task.status.value == "ACTIVE"


def test_submit_malformed_batch_untouched(node):
    node.handle("register_client", {"client_id": "car-1"}, CTOK)
    before = node.store.dump()
    for bad in (
        {"client_id": "car-1", "results": "nope"},
        {"client_id": "car-1", "results": [{"task_id": 5, "seq": 0}]},
        {"client_id": "car-1", "results": [{"task_id": "x" * 32, "seq": True}]},
        {"client_id": "car-1", "statuses": [{"task_id": "x" * 32, "status": "ACTIVE"}]},
        {"client_id": "car-1", "statuses": [{"task_id": "x" * 32, "status": "ODD"}]},
    ):
        with pytest.raises(RpcError) as err:
            node.handle("submit", bad, CTOK)
        assert err.value.code == "invalid-argument"
    after = node.store.dump()
    before["clients"]["car-1"]["last_seen"] = after["clients"]["car-1"]["last_seen"]
    assert before == after


def test_cancel_paths(node):
    out = node.handle("user_commit", _commit_params(), UTOK)
    tid = out["task_ids"][0]
    events = node.bus.subscribe(assignment_topic(out["assignment_ids"][0]))
    ok = node.handle("user_cancel", {"task_id": tid}, UTOK)
    assert ok == {"task_id": tid, "status": "CANCELED"}
    assert events.get(timeout=1)["event"]["status"] == "CANCELED"
    with pytest.raises(RpcError) as err:
        node.handle("user_cancel", {"task_id": tid}, UTOK)
    assert err.value.code == "failed-precondition"
    with pytest.raises(RpcError) as err:
        node.handle("user_cancel", {"task_id": new_document_id()}, UTOK)
    assert err.value.code == "not-found"


def test_get_payload_and_metrics(node):
    out = node.handle("user_commit", _commit_params(payload_body="x = 1\n"), UTOK)
    got = node.handle("get_payload", {"payload_id": out["payload_ids"][0]}, CTOK)
    assert got["payload"]["body"] == "x = 1\n"
    with pytest.raises(RpcError) as err:
        node.handle("get_payload", {"payload_id": new_document_id()}, CTOK)
    assert err.value.code == "not-found"
    assert node.metrics["get_payload"] == 2
    with pytest.raises(RpcError):
        node.handle("get_parameters", {"parameters_id": new_document_id()}, UTOK)


def test_user_query_through_handler(node):
    out = node.handle("user_commit", _commit_params(tasks=2), UTOK)
    rows = node.handle(
        "user_query",
        {"filter": {"kind": "tasks", "assignment_id": out["assignment_ids"][0]}},
        UTOK,
    )["rows"]
    assert len(rows) == 2
    with pytest.raises(RpcError) as err:
        node.handle("user_query", {"filter": {"kind": "martians"}}, UTOK)
    assert err.value.code == "invalid-argument"
    with pytest.raises(RpcError) as err:
        node.handle("user_query", {"filter": None}, UTOK)
    assert err.value.code == "invalid-argument"


# ---------------------------------------------------------------------------
# Transport.

def test_rpc_socket_roundtrip(node):
    server = RpcServer(node)
    try:
        client = RpcClient(server.addr, UTOK)
        out = client.call("user_commit", _commit_params())
        assert len(out["task_ids"]) == 1
        with pytest.raises(RpcError) as err:
            client.call("user_cancel", {"task_id": new_document_id()})
        assert err.value.code == "not-found"
        # The connection survives an error response.
        rows = client.call("user_query", {"filter": {"kind": "assignments"}})["rows"]
        assert len(rows) == 1
        client.close()
    finally:
        server.close()


def test_rpc_bad_token_over_socket(node):
    server = RpcServer(node)
    try:
        client = RpcClient(server.addr, "nope")
        with pytest.raises(RpcError) as err:
            client.call("fetch_state", {"client_id": "car-1"})
        assert err.value.code == "unauthenticated"
    finally:
        server.close()
        client.close()


def test_rpc_client_reconnects_after_server_restart(node):
    server = RpcServer(node)
    addr = server.addr
    client = RpcClient(addr, CTOK)
    assert client.call("register_client", {"client_id": "car-2"})["created"]
    server.close()
    time.sleep(0.05)
    # Same port: the client's second attempt re-dials.
    host, port = addr.split(":")
    server2 = RpcServer(node, host=host, port=int(port))
    try:
        snap = client.call("fetch_state", {"client_id": "car-2"})
        assert snap["ts"] == 0
    finally:
        client.close()
        server2.close()


def test_rpc_transport_error_when_server_gone(node):
    server = RpcServer(node)
    addr = server.addr
    server.close()
    client = RpcClient(addr, CTOK)
    with pytest.raises(RpcTransportError):
        client.call("fetch_state", {"client_id": "car-1"})


def test_retrying_client_waits_out_an_outage(node):
    probe = RpcServer(node)
    host, port = probe.addr.split(":")
    probe.close()
    time.sleep(0.02)
    retrying = RetryingRpcClient(
        f"{host}:{port}", CTOK, base_s=0.05, cap_s=0.2
    )
    started = threading.Event()
    resurrect = {}

    def bring_up():
        started.wait()
        time.sleep(0.3)
        resurrect["server"] = RpcServer(node, host=host, port=int(port))

    t = threading.Thread(target=bring_up, daemon=True)
    t.start()
    started.set()
    out = retrying.call("register_client", {"client_id": "car-5"})
    assert out["created"] is True
    t.join()
    resurrect["server"].close()
    retrying.close()


def test_retrying_client_passes_through_hard_errors(node):
    server = RpcServer(node)
    try:
        retrying = RetryingRpcClient(server.addr, UTOK, base_s=0.01)
        with pytest.raises(RpcError) as err:
            retrying.call("user_cancel", {"task_id": new_document_id()})
        assert err.value.code == "not-found"
        retrying.close()
    finally:
        server.close()


def test_retrying_client_gives_up_when_asked(node):
    server = RpcServer(node)
    addr = server.addr
    server.close()
    retrying = RetryingRpcClient(addr, CTOK, base_s=0.05)
    result = {}

    def caller():
        try:
            retrying.call("fetch_state", {"client_id": "car-1"})
        except RpcTransportError:
            result["gave_up"] = True

    t = threading.Thread(target=caller)
    t.start()
    time.sleep(0.15)
    retrying.close()
    t.join(timeout=2)
    assert result.get("gave_up") is True
