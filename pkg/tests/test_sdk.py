"""User library: drafts, atomic commits, await/stream, cancel."""

from __future__ import annotations

import threading
import time

import pytest

from spada.model import TaskStatus, is_document_id
from spada.rpc import RpcError
from spada.sdk import SdkError, User
from tests.stack import CLIENT_TOKEN, Stack

CID = "car-1"


@pytest.fixture()
def stack():
    with Stack(online_window_s=0.3) as s:
        s.node.handle("register_client", {"client_id": CID}, CLIENT_TOKEN)
        yield s


@pytest.fixture()
def user(stack):
    with User(_user_config(stack)) as u:
        yield u


def _user_config(stack):
    from spada.config import UserConfig
    from tests.stack import USER_TOKEN

    return UserConfig(
        server_addr=stack.server_addr, bus_addr=stack.bus_addr, token=USER_TOKEN
    )


def _fake_client_submit(stack, task_id, values, status=None):
    """Push results the way an agent would, without running one."""
    params = {
        "client_id": CID,
        "results": [
            {"task_id": task_id, "seq": i, "value": v, "produced_at": 1}
            for i, v in enumerate(values)
        ],
        "statuses": (
            []
            if status is None
            else [{"task_id": task_id, "status": status, "error_log": ""}]
        ),
    }
    return stack.node.handle("submit", params, CLIENT_TOKEN)


def test_drafts_are_local_until_commit(stack, user):
    payload = user.payload("pass\n", name="noop")
    params = user.parameters({"seconds": 5, "signal_name": "speed"})
    task = user.task(CID, payload, params)
    assignment = user.assignment("Mean speed", [task])
    assert is_document_id(payload.id) and not payload.committed
    assert task.content["payload_id"] == payload.id
    assert assignment.content["task_ids"] == [task.id]
    assert stack.node.metrics["user_commit"] == 0

    assignment.commit()
    assert all(d.committed for d in (payload, params, task, assignment))
    assert stack.node.metrics["user_commit"] == 1
    rows = user.query({"kind": "tasks", "assignment_id": assignment.id})
    assert [r["id"] for r in rows] == [task.id]
    assert rows[0]["parameters_id"] == params.id


def test_second_commit_is_a_noop(stack, user):
    assignment = user.assignment(
        "job", [user.task(CID, user.payload("pass\n", name="p"))]
    )
    assert assignment.commit() is assignment
    assignment.commit()
    assert stack.node.metrics["user_commit"] == 1


def test_committed_payload_reused_by_reference(stack, user):
    payload = user.payload("pass\n", name="shared").commit()
    assignment = user.assignment("second", [user.task(CID, payload)])
    assignment.commit()
    # The second batch referenced the stored payload instead of
    # resending it; the store kept exactly one copy.
    assert len(user.query({"kind": "tasks", "assignment_id": assignment.id})) == 1
    assert stack.node.metrics["user_commit"] == 2


def test_draft_validation_errors(user):
    with pytest.raises(SdkError):
        user.payload("", name="empty")
    with pytest.raises(SdkError):
        user.task(CID, user.payload("pass\n", name="p")).commit()
    with pytest.raises(SdkError):
        user.assignment("bad", ["not-a-draft"])
    payload = user.payload("pass\n", name="p")
    with pytest.raises(SdkError):
        user.task(CID, payload, payload)  # parameters ref of wrong kind


def test_unknown_client_rejection_keeps_drafts_uncommitted(stack, user):
    task = user.task("ghost-client", user.payload("pass\n", name="p"))
    assignment = user.assignment("job", [task])
    with pytest.raises(RpcError) as err:
        assignment.commit()
    assert err.value.code == "not-found"
    assert not assignment.committed and not task.committed
    # After fixing the cause, the same drafts commit cleanly.
    stack.node.handle("register_client", {"client_id": "ghost-client"}, CLIENT_TOKEN)
    assignment.commit()
    assert assignment.committed


def test_await_zero_task_assignment(user):
    report = user.assignment("empty", []).commit().await_results()
    assert report.tasks == {} and not report.timed_out


def test_await_unknown_assignment(user):
    with pytest.raises(RpcError) as err:
        user.await_assignment("f" * 32)
    assert err.value.code == "not-found"


def test_await_blocks_until_terminal_and_matches_query(stack, user):
    task = user.task(CID, user.payload("pass\n", name="p"))
    assignment = user.assignment("job", [task]).commit()

    def produce():
        time.sleep(0.3)
        _fake_client_submit(stack, task.id, [{"Mean": 49.5}], status="FINISHED")

    threading.Thread(target=produce).start()
    t0 = time.monotonic()
    report = assignment.await_results(timeout=10)
    assert time.monotonic() - t0 < 5
    assert not report.timed_out
    assert report.tasks[task.id].status == "FINISHED"
    assert report.tasks[task.id].results == [{"Mean": 49.5}]
    assert report.all_finished()
    # The stream view and the store agree after termination.
    results = user.query({"kind": "results", "task_id": task.id})
    assert [r["value"] for r in results] == report.tasks[task.id].results


def test_await_timeout_returns_partial(stack, user):
    task = user.task(CID, user.payload("pass\n", name="p"))
    assignment = user.assignment("job", [task]).commit()
    _fake_client_submit(stack, task.id, [{"n": 1}])
    report = assignment.await_results(timeout=0.4)
    assert report.timed_out
    assert report.tasks[task.id].status == "ACTIVE"
    assert report.tasks[task.id].results == [{"n": 1}]
    assert not report.all_finished()


def test_await_includes_canceled_tasks(stack, user):
    task = user.task(CID, user.payload("pass\n", name="p"))
    assignment = user.assignment("job", [task]).commit()
    _fake_client_submit(stack, task.id, [{"n": 0}])
    user.cancel(task)
    report = assignment.await_results(timeout=5)
    assert report.tasks[task.id].status == "CANCELED"
    assert report.tasks[task.id].results == [{"n": 0}]


def test_cancel_terminal_task_surfaces_precondition(stack, user):
    task = user.task(CID, user.payload("pass\n", name="p"))
    user.assignment("job", [task]).commit()
    _fake_client_submit(stack, task.id, [], status="FINISHED")
    with pytest.raises(RpcError) as err:
        user.cancel(task)
    assert err.value.code == "failed-precondition"
    assert "FINISHED" in err.value.msg


def test_stream_replays_history_then_live_events(stack, user):
    task = user.task(CID, user.payload("pass\n", name="p"))
    assignment = user.assignment("job", [task]).commit()
    _fake_client_submit(stack, task.id, ["a", "b"])

    def produce():
        time.sleep(0.3)
        stack.node.handle(
            "submit",
            {
                "client_id": CID,
                "results": [
                    {"task_id": task.id, "seq": 2, "value": "c", "produced_at": 1}
                ],
                "statuses": [
                    {"task_id": task.id, "status": "FINISHED", "error_log": ""}
                ],
            },
            CLIENT_TOKEN,
        )

    threading.Thread(target=produce).start()
    events = list(assignment.stream())
    kinds = [(e["kind"], e.get("seq"), e.get("value", e.get("status"))) for e in events]
    assert kinds == [
        ("result", 0, "a"),
        ("result", 1, "b"),
        ("result", 2, "c"),
        ("status", None, "FINISHED"),
    ]


def test_stream_quiet_assignment_ends_on_termination(stack, user):
    task = user.task(CID, user.payload("pass\n", name="p"))
    assignment = user.assignment("job", [task]).commit()
    _fake_client_submit(stack, task.id, [], status="ERROR")
    events = list(assignment.stream())
    assert events == [{"kind": "status", "task_id": task.id, "status": "ERROR"}]


def test_get_clients_online_window(stack, user):
    stack.node.handle("register_client", {"client_id": "sleepy"}, CLIENT_TOKEN)
    stack.node.handle("fetch_state", {"client_id": CID}, CLIENT_TOKEN)
    rows = {r["client_id"]: r["online"] for r in user.get_clients()}
    assert rows[CID] is True
    assert rows["sleepy"] is False
    assert [r["client_id"] for r in user.get_clients(online_only=True)] == [CID]
    time.sleep(0.4)  # window is 0.3 s in this stack
    assert user.get_clients(online_only=True) == []
