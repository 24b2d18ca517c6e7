"""Command line behavior over a live loopback deployment."""

from __future__ import annotations

import json

import pytest

from spada import cli
from tests.stack import CLIENT_TOKEN, USER_TOKEN, Stack

CID = "car-1"


@pytest.fixture()
def stack():
    with Stack() as s:
        s.node.handle("register_client", {"client_id": CID}, CLIENT_TOKEN)
        yield s


@pytest.fixture()
def cfg(stack, tmp_path):
    path = tmp_path / "user.json"
    path.write_text(
        json.dumps(
            {
                "server_addr": stack.server_addr,
                "bus_addr": stack.bus_addr,
                "token": USER_TOKEN,
            }
        )
    )
    return str(path)


@pytest.fixture()
def payload_file(tmp_path):
    path = tmp_path / "job.py"
    path.write_text("pass\n")
    return str(path)


def _finish(stack, task_id, values=()):
    stack.node.handle(
        "submit",
        {
            "client_id": CID,
            "results": [
                {"task_id": task_id, "seq": i, "value": v, "produced_at": 1}
                for i, v in enumerate(values)
            ],
            "statuses": [{"task_id": task_id, "status": "FINISHED", "error_log": ""}],
        },
        CLIENT_TOKEN,
    )


def _submit_json(cfg, payload_file, capsys, *extra):
    code = cli.main(
        ["-c", cfg, "--json", "submit", "--payload", payload_file,
         "--clients", CID, *extra]
    )
    assert code == 0
    return json.loads(capsys.readouterr().out)


def test_submit_then_results_json(stack, cfg, payload_file, capsys):
    out = _submit_json(cfg, payload_file, capsys)
    (tid,) = out["task_ids"]
    _finish(stack, tid, [{"Mean": 50.0}])
    code = cli.main(["-c", cfg, "--json", "results", out["assignment_id"]])
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert report["timed_out"] is False
    assert report["tasks"][tid] == {
        "status": "FINISHED",
        "results": [{"Mean": 50.0}],
        "error_log": "",
    }


def test_submit_human_output_names_tasks(stack, cfg, payload_file, capsys):
    code = cli.main(
        ["-c", cfg, "submit", "--payload", payload_file, "--clients", CID,
         "--name", "speed probe"]
    )
    assert code == 0
    out = capsys.readouterr().out
    assert out.startswith("assignment ")
    assert f"-> {CID}" in out


def test_results_human_and_timeout_exit(stack, cfg, payload_file, capsys):
    out = _submit_json(cfg, payload_file, capsys)
    (tid,) = out["task_ids"]
    code = cli.main(
        ["-c", cfg, "results", out["assignment_id"], "--timeout", "0.3"]
    )
    assert code == cli.EXIT_TIMEOUT
    text = capsys.readouterr().out
    assert f"task {tid}: ACTIVE" in text
    assert "timed out" in text


def test_results_follow_prints_stream(stack, cfg, payload_file, capsys):
    out = _submit_json(cfg, payload_file, capsys)
    (tid,) = out["task_ids"]
    _finish(stack, tid, ["a", {"n": 2}])
    code = cli.main(["-c", cfg, "results", out["assignment_id"], "--follow"])
    assert code == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines == [
        f'result {tid} #0 "a"',
        f'result {tid} #1 {{"n": 2}}',
        f"status {tid} -> FINISHED",
    ]


def test_results_unknown_assignment_is_server_error(stack, cfg, capsys):
    code = cli.main(["-c", cfg, "results", "f" * 32])
    assert code == cli.EXIT_SERVER
    assert "not-found" in capsys.readouterr().err


def test_cancel_then_cancel_again(stack, cfg, payload_file, capsys):
    out = _submit_json(cfg, payload_file, capsys)
    (tid,) = out["task_ids"]
    assert cli.main(["-c", cfg, "cancel", tid]) == 0
    assert f"task {tid} -> CANCELED" in capsys.readouterr().out
    assert cli.main(["-c", cfg, "cancel", tid]) == cli.EXIT_SERVER
    err = capsys.readouterr().err
    assert "failed-precondition" in err and "CANCELED" in err


def test_clients_listing(stack, cfg, capsys):
    assert cli.main(["-c", cfg, "clients"]) == 0
    assert "offline" in capsys.readouterr().out  # registered but never seen
    assert cli.main(["-c", cfg, "--json", "clients", "--online"]) == 0
    assert json.loads(capsys.readouterr().out) == []


def test_config_and_input_errors_are_usage_errors(stack, cfg, tmp_path, capsys):
    assert cli.main(["-c", str(tmp_path / "absent.json"), "clients"]) == 2
    assert (
        cli.main(
            ["-c", cfg, "submit", "--payload", str(tmp_path / "no.py"),
             "--clients", CID]
        )
        == 2
    )
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    good = tmp_path / "p.py"
    good.write_text("pass\n")
    assert (
        cli.main(
            ["-c", cfg, "submit", "--payload", str(good), "--params", str(bad),
             "--clients", CID]
        )
        == 2
    )
    assert (
        cli.main(["-c", cfg, "submit", "--payload", str(good), "--clients", ","])
        == 2
    )
    capsys.readouterr()


def test_missing_verb_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main([])
    assert exc.value.code == 2


def _normalize_ids(tree):
    """Replace random document ids with stable first-seen placeholders."""
    from spada.model import is_document_id

    mapping: dict[str, str] = {}

    def walk(node):
        if isinstance(node, dict):
            return {k: walk(v) for k, v in node.items()}
        if isinstance(node, list):
            return [walk(v) for v in node]
        if isinstance(node, str) and is_document_id(node):
            return mapping.setdefault(node, f"id-{len(mapping)}")
        return node

    return walk(tree)


def test_cli_and_library_produce_identical_commit_batches(
    stack, cfg, payload_file, tmp_path, capsys
):
    from spada.config import UserConfig
    from spada.sdk import User

    captured = []
    inner = stack.node.handle

    def spy(method, params, token):
        if method == "user_commit":
            captured.append(params)
        return inner(method, params, token)

    stack.node.handle = spy
    params_file = tmp_path / "params.json"
    params_file.write_text('{"seconds": 5}')
    assert (
        cli.main(
            ["-c", cfg, "submit", "--payload", payload_file, "--params",
             str(params_file), "--clients", f"{CID},{CID}", "--name", "probe"]
        )
        == 0
    )
    capsys.readouterr()
    with User(
        UserConfig(
            server_addr=stack.server_addr, bus_addr=stack.bus_addr, token=USER_TOKEN
        )
    ) as user:
        payload = user.payload("pass\n", name="probe")
        params = user.parameters({"seconds": 5})
        tasks = [user.task(CID, payload, params) for _ in range(2)]
        user.assignment("probe", tasks).commit()
    assert len(captured) == 2
    assert _normalize_ids(captured[0]) == _normalize_ids(captured[1])
