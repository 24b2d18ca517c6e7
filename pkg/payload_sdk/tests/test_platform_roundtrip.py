"""The client library against a real deployment, end to end.

Spawns the stack and an agent as separate processes and drives them only
through their public surfaces: the config files they write, the command
line, and the task socket inside the sandbox.  The payload itself is a
plain script importing this library.
"""

import json
import os
import shutil
import subprocess
import textwrap
import time

import pytest

STACK = shutil.which("spada-stack")
CLI = shutil.which("spada")
AGENT = shutil.which("spada-agent")

pytestmark = pytest.mark.skipif(
    not (STACK and CLI and AGENT), reason="platform command line not installed"
)

MEAN_PAYLOAD = textwrap.dedent(
    """
    import spada_payload as sp

    window = sp.parameters["iterations"]
    name = sp.parameters["signal"]
    total = 0.0
    for i in range(window):
        total += sp.next_signal(name)["value"]
        sp.publish({"Mean": total / (i + 1), "n_values": i + 1})
    assert sp.get_state() is None
    sp.put_state(b"done")
    assert sp.get_state() == b"done"
    """
)


def wait_for(predicate, timeout=30.0, interval=0.05, msg="condition"):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        value = predicate()
        if value:
            return value
        time.sleep(interval)
    raise AssertionError(f"timed out waiting for {msg}")


def read_json(path):
    try:
        return json.loads(path.read_text("utf-8"))
    except (OSError, json.JSONDecodeError):
        return None


def run_cli(config, *argv):
    proc = subprocess.run(
        [CLI, "--json", "-c", str(config), *argv],
        capture_output=True,
        text=True,
        timeout=60,
    )
    assert proc.returncode == 0, proc.stderr
    return json.loads(proc.stdout)


@pytest.fixture
def deployment(tmp_path):
    env = dict(os.environ, PYTHONUNBUFFERED="1")
    root = tmp_path / "stack"
    procs = []
    try:
        procs.append(
            subprocess.Popen(
                [STACK, "--data", str(root), "--agents", "1", "--ephemeral"],
                env=env,
                stdout=subprocess.DEVNULL,
                stderr=subprocess.DEVNULL,
            )
        )
        # The stack's own agent has no signal feeds; its config file is
        # read only to learn the addresses and the client token.
        seed_cfg = wait_for(
            lambda: read_json(root / "agent-dev-0.json"), msg="stack config files"
        )
        csv = tmp_path / "velocity.csv"
        csv.write_text("t_ms,Velocity\n0,50\n20,50\n40,50\n", "utf-8")
        agent_cfg = tmp_path / "agent.json"
        agent_cfg.write_text(
            json.dumps(
                {
                    "client_id": "car-csv",
                    "server_addr": seed_cfg["server_addr"],
                    "bus_addr": seed_cfg["bus_addr"],
                    "token": seed_cfg["token"],
                    "data_dir": str(tmp_path / "agent-data"),
                    "sandbox": {"grace_seconds": 2.0},
                    "retry_base_s": 0.2,
                    "retry_cap_s": 2.0,
                    "refetch_interval_s": 5.0,
                    "signals": [
                        {"kind": "csv", "path": str(csv), "loop": True}
                    ],
                },
                indent=2,
            ),
            "utf-8",
        )
        procs.append(
            subprocess.Popen(
                [AGENT, "-c", str(agent_cfg)],
                env=env,
                stdout=subprocess.DEVNULL,
                stderr=subprocess.DEVNULL,
            )
        )
        user_cfg = root / "user.json"
        wait_for(
            lambda: any(
                row["client_id"] == "car-csv"
                for row in run_cli(user_cfg, "clients")
            ),
            msg="agent registration",
        )
        yield user_cfg
    finally:
        for proc in reversed(procs):
            proc.terminate()
        for proc in procs:
            try:
                proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                proc.kill()


def test_running_mean_over_constant_csv_is_exact(deployment, tmp_path):
    payload = tmp_path / "mean.py"
    payload.write_text(MEAN_PAYLOAD, "utf-8")
    params = tmp_path / "params.json"
    params.write_text('{"iterations": 5, "signal": "Velocity"}', "utf-8")
    submitted = run_cli(
        deployment,
        "submit",
        "--payload", str(payload),
        "--params", str(params),
        "--clients", "car-csv",
        "--name", "mean-demo",
    )
    (task_id,) = submitted["task_ids"]
    report = run_cli(
        deployment, "results", submitted["assignment_id"], "--timeout", "30"
    )
    assert not report["timed_out"]
    task = report["tasks"][task_id]
    assert task["status"] == "FINISHED", task["error_log"]
    rows = task["results"]
    assert [row["n_values"] for row in rows] == [1, 2, 3, 4, 5]
    # Every consumed reading is exactly 50, so every running mean is too.
    assert all(row["Mean"] == 50.0 for row in rows)
