"""HTTP facade: routing, auth, error mapping, event streaming."""

from __future__ import annotations

import json
import threading
import time
import urllib.error
import urllib.parse
import urllib.request

import pytest

from spada.bus import assignment_topic
from spada.gateway import GatewayServer
from spada.model import new_document_id
from tests.stack import CLIENT_TOKEN, USER_TOKEN, Stack

CID = "car-1"


@pytest.fixture()
def stack():
    with Stack() as s:
        s.node.handle("register_client", {"client_id": CID}, CLIENT_TOKEN)
        yield s


@pytest.fixture()
def gateway(stack):
    gw = GatewayServer(stack.node)
    yield gw
    gw.close()


def _request(gateway, method, path, *, body=None, token=USER_TOKEN, headers=None):
    req = urllib.request.Request(
        gateway.url + path,
        data=None if body is None else json.dumps(body).encode(),
        method=method,
    )
    if token is not None:
        req.add_header("Authorization", f"Bearer {token}")
    for key, value in (headers or {}).items():
        req.add_header(key, value)
    try:
        with urllib.request.urlopen(req, timeout=5) as resp:
            return resp.status, json.loads(resp.read() or b"{}")
    except urllib.error.HTTPError as exc:
        return exc.code, json.loads(exc.read() or b"{}")


def _batch(client=CID):
    payload_id = new_document_id()
    task_id = new_document_id()
    assignment_id = new_document_id()
    return {
        "payloads": [{"id": payload_id, "name": "p", "body": "pass\n"}],
        "parameters": [],
        "tasks": [
            {
                "id": task_id,
                "assignment_id": assignment_id,
                "client_id": client,
                "payload_id": payload_id,
                "parameters_id": None,
                "status": "ACTIVE",
                "result_count": 0,
            }
        ],
        "assignments": [
            {"id": assignment_id, "name": "job", "task_ids": [task_id]}
        ],
    }


def test_commit_query_cancel_roundtrip(stack, gateway):
    batch = _batch()
    status, out = _request(gateway, "POST", "/v1/commit", body=batch)
    assert status == 200
    task_id = out["ok"]["task_ids"][0]

    flt = urllib.parse.quote(json.dumps({"kind": "tasks", "task_id": task_id}))
    status, out = _request(gateway, "GET", f"/v1/query?filter={flt}")
    assert status == 200
    assert out["ok"]["rows"][0]["status"] == "ACTIVE"

    status, out = _request(gateway, "POST", f"/v1/tasks/{task_id}/cancel")
    assert status == 200
    assert out["ok"] == {"task_id": task_id, "status": "CANCELED"}


def test_auth_required_and_role_checked(stack, gateway):
    status, out = _request(gateway, "GET", "/v1/query?filter=%7B%7D", token=None)
    assert status == 401
    assert out["err"]["code"] == "unauthenticated"
    # A client token is authenticated but not a user.
    status, _ = _request(
        gateway, "GET", "/v1/query?filter=%7B%7D", token=CLIENT_TOKEN
    )
    assert status == 401


def test_error_mapping(stack, gateway):
    status, out = _request(gateway, "GET", "/v1/nope")
    assert (status, out["err"]["code"]) == (404, "not-found")

    status, out = _request(
        gateway, "POST", f"/v1/tasks/{'e' * 32}/cancel"
    )
    assert (status, out["err"]["code"]) == (404, "not-found")

    status, out = _request(gateway, "GET", "/v1/query?filter=nope")
    assert (status, out["err"]["code"]) == (400, "invalid-argument")

    status, out = _request(
        gateway, "GET", "/v1/query?filter=" + urllib.parse.quote('{"kind":"x"}')
    )
    assert (status, out["err"]["code"]) == (400, "invalid-argument")

    status, out = _request(gateway, "GET", "/v1/stream")
    assert (status, out["err"]["code"]) == (400, "invalid-argument")

    # Terminal tasks cannot be canceled.
    _, committed = _request(gateway, "POST", "/v1/commit", body=_batch())
    task_id = committed["ok"]["task_ids"][0]
    stack.node.handle(
        "submit",
        {
            "client_id": CID,
            "results": [],
            "statuses": [{"task_id": task_id, "status": "FINISHED", "error_log": ""}],
        },
        CLIENT_TOKEN,
    )
    status, out = _request(gateway, "POST", f"/v1/tasks/{task_id}/cancel")
    assert (status, out["err"]["code"]) == (409, "failed-precondition")


def test_malformed_commit_body_is_bad_request(stack, gateway):
    req = urllib.request.Request(
        gateway.url + "/v1/commit", data=b"{broken", method="POST"
    )
    req.add_header("Authorization", f"Bearer {USER_TOKEN}")
    with pytest.raises(urllib.error.HTTPError) as exc:
        urllib.request.urlopen(req, timeout=5)
    assert exc.value.code == 400


def test_cors_preflight(stack, gateway):
    req = urllib.request.Request(gateway.url + "/v1/commit", method="OPTIONS")
    with urllib.request.urlopen(req, timeout=5) as resp:
        assert resp.status == 204
        assert resp.headers["Access-Control-Allow-Origin"] == "*"
        assert "Authorization" in resp.headers["Access-Control-Allow-Headers"]


def test_stream_delivers_bus_frames(stack, gateway):
    _, committed = _request(gateway, "POST", "/v1/commit", body=_batch())
    task_id = committed["ok"]["task_ids"][0]
    assignment_id = committed["ok"]["assignment_ids"][0]

    topic = urllib.parse.quote(assignment_topic(assignment_id))
    req = urllib.request.Request(gateway.url + f"/v1/stream?topic={topic}")
    req.add_header("Authorization", f"Bearer {USER_TOKEN}")
    resp = urllib.request.urlopen(req, timeout=10)
    assert resp.headers["Content-Type"] == "text/event-stream"

    def produce():
        time.sleep(0.2)
        stack.node.handle(
            "submit",
            {
                "client_id": CID,
                "results": [
                    {"task_id": task_id, "seq": 0, "value": {"n": 1}, "produced_at": 1}
                ],
                "statuses": [],
            },
            CLIENT_TOKEN,
        )

    threading.Thread(target=produce).start()
    line = resp.readline()
    while not line.startswith(b"data: "):
        line = resp.readline()
    frame = json.loads(line[len(b"data: "):])
    assert frame["topic"] == assignment_topic(assignment_id)
    assert frame["event"] == {
        "kind": "result",
        "task_id": task_id,
        "seq": 0,
        "value": {"n": 1},
    }
    resp.close()
