"""Dummy mode: no platform, no sockets, reproducible when seeded."""

import json

import pytest

import spada_payload as sp
from spada_payload import ApiError, PayloadContext


def ctx(**env):
    return PayloadContext(env={k: str(v) for k, v in env.items()})


def test_mode_is_dummy_exactly_when_endpoint_unset():
    assert ctx().mode == "dummy"
    # A set-but-dead endpoint must raise, not fall back to dummy.
    with pytest.raises(ApiError) as err:
        PayloadContext(env={"SPADA_TASK_API": "/nonexistent/api.sock"})
    assert err.value.code == "unavailable"


def test_parameters_come_from_local_file_or_default_to_none(tmp_path):
    assert ctx().parameters is None
    f = tmp_path / "params.json"
    f.write_text(json.dumps({"iterations": 3, "signal": "Velocity"}), "utf-8")
    c = ctx(SPADA_PARAMETERS=f)
    assert c.parameters == {"iterations": 3, "signal": "Velocity"}


def test_seeded_signals_are_reproducible():
    def draw(seed, n=5):
        c = ctx(SPADA_DUMMY_SEED=seed)
        return [c.next_signal("speed")["value"] for _ in range(n)]

    assert draw(7) == draw(7)
    assert draw(7) != draw(8)
    assert all(0.0 <= v < 1.0 for v in draw(7))


def test_readings_have_the_wire_shape_and_advance():
    c = ctx(SPADA_DUMMY_SEED=1)
    first = c.next_signal("speed")
    second = c.get_signal("speed")
    assert set(first) == {"name", "value", "observed_at"}
    assert first["name"] == "speed"
    assert second["observed_at"] > first["observed_at"]


def test_publish_prints_one_line_per_call(capsys):
    c = ctx(SPADA_DUMMY_SEED=1)
    assert c.publish({"Mean": 1.0}) == 0
    assert c.publish({"Mean": 2.0}) == 1
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 2
    assert lines[0].startswith("publish #0 ")
    assert json.loads(lines[0].split(" ", 2)[2]) == {"Mean": 1.0}
    assert lines[1].startswith("publish #1 ")


def test_state_roundtrip_and_local_cap(capsys):
    c = ctx()
    assert c.get_state() is None
    c.put_state(b"\x00\x01")
    assert c.get_state() == b"\x00\x01"
    assert "put_state 2 bytes" in capsys.readouterr().out
    with pytest.raises(ApiError) as err:
        c.put_state(b"x" * (sp.MAX_STATE_BYTES + 1))
    assert err.value.code == "state-too-large"
    with pytest.raises(TypeError):
        c.put_state("not bytes")
