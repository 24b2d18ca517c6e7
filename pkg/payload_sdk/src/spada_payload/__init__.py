"""Client library for payload scripts.

A payload reaches its host through a UNIX socket named by the
``SPADA_TASK_API`` environment variable, one JSON object per line, one
reply per request.  When that variable is absent the module runs as a
self-contained dummy instead: parameters come from a local JSON file,
signal readings are drawn from a seeded generator, and publishes are
printed to standard output.  The same script therefore runs unchanged
as a plain program on a desk and inside a task container in the field.

Typical use::

    import spada_payload as sp

    window = sp.parameters["iterations"]
    total = 0.0
    for i in range(window):
        total += sp.next_signal("Velocity")["value"]
        sp.publish({"Mean": total / (i + 1), "n_values": i + 1})

The module never opens any connection other than the task socket.
"""

from __future__ import annotations

import base64
import json
import os
import random
import socket
from typing import Any, Mapping

__all__ = [
    "ApiError",
    "PayloadContext",
    "context",
    "get_signal",
    "get_state",
    "next_signal",
    "publish",
    "put_state",
]

API_ENV = "SPADA_TASK_API"
TASK_ID_ENV = "SPADA_TASK_ID"
SEED_ENV = "SPADA_DUMMY_SEED"
PARAMETERS_ENV = "SPADA_PARAMETERS"

# Largest state blob the host accepts.  Enforced locally in dummy mode
# so an oversized payload fails on the desk, not in the field.
MAX_STATE_BYTES = 16 * 1024 * 1024


class ApiError(RuntimeError):
    """A call the host refused, or a transport that gave out."""

    def __init__(self, code: str, msg: str = ""):
        super().__init__(f"{code}: {msg}" if msg else code)
        self.code = code
        self.msg = msg


def _encode(frame: dict[str, Any]) -> bytes:
    # Canonical form: sorted keys, no whitespace, raw unicode.
    return (
        json.dumps(
            frame, sort_keys=True, separators=(",", ":"), ensure_ascii=False
        ).encode("utf-8")
        + b"\n"
    )


class _Transport:
    """One line-JSON connection to the task socket.

    The host answers strictly in order, so the request id only guards
    against framing bugs, not reordering.
    """

    def __init__(self, endpoint: str):
        try:
            self._sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
            self._sock.connect(endpoint)
        except OSError as exc:
            raise ApiError("unavailable", f"cannot reach task API: {exc}") from exc
        self._rfile = self._sock.makefile("rb")
        self._next_id = 0

    def call(self, method: str, params: dict[str, Any]) -> Any:
        self._next_id += 1
        frame = {"id": self._next_id, "method": method, "params": params}
        try:
            self._sock.sendall(_encode(frame))
            raw = self._rfile.readline()
        except OSError as exc:
            raise ApiError("unavailable", f"task API transport failed: {exc}") from exc
        if not raw:
            raise ApiError("unavailable", "task API closed the connection")
        reply = json.loads(raw)
        if reply.get("id") != self._next_id:
            raise ApiError(
                "protocol",
                f"answer {reply.get('id')!r} to request {self._next_id}",
            )
        if "err" in reply:
            err = reply["err"] or {}
            raise ApiError(str(err.get("code", "unknown")), str(err.get("msg", "")))
        return reply.get("ok")


class PayloadContext:
    """The payload's view of its surroundings.

    ``mode`` is ``"connected"`` exactly when ``SPADA_TASK_API`` names a
    socket.  A set-but-unreachable endpoint raises rather than silently
    degrading to the dummy, so a misconfigured container cannot fake
    progress.
    """

    def __init__(self, env: Mapping[str, str] | None = None):
        env = os.environ if env is None else env
        self.api_endpoint = env.get(API_ENV)
        self.task_id = env.get(TASK_ID_ENV)
        self.mode = "connected" if self.api_endpoint else "dummy"
        self._params: Any = None
        self._params_loaded = False
        if self.mode == "connected":
            self._transport = _Transport(self.api_endpoint)
        else:
            seed = env.get(SEED_ENV)
            self._rng = random.Random(int(seed) if seed is not None else None)
            self._params_path = env.get(PARAMETERS_ENV)
            self._state: bytes | None = None
            self._seq = 0
            self._clock = 0

    # -- parameters ---------------------------------------------------------

    @property
    def parameters(self) -> Any:
        """The task's parameter tree, or None when it has none.

        Fetched once and cached; parameters are immutable for the life
        of a task.
        """
        if not self._params_loaded:
            if self.mode == "connected":
                try:
                    self._params = self._transport.call("get_parameters", {})["value"]
                except ApiError as exc:
                    if exc.code != "no-parameters":
                        raise
            elif self._params_path:
                with open(self._params_path, encoding="utf-8") as fh:
                    self._params = json.load(fh)
            self._params_loaded = True
        return self._params

    # -- signals ------------------------------------------------------------

    def next_signal(self, name: str, timeout_ms: int | float | None = None) -> dict:
        """Block for a reading newer than the last one this task consumed.

        Without ``timeout_ms`` the host's default applies.  Raises
        ApiError("timeout") when nothing fresh arrives in time.
        """
        if self.mode == "connected":
            params: dict[str, Any] = {"name": name}
            if timeout_ms is not None:
                params["timeout_ms"] = timeout_ms
            return self._transport.call("next_signal", params)
        return self._dummy_reading(name)

    def get_signal(self, name: str) -> dict | None:
        """The latest reading without waiting, or None before the first."""
        if self.mode == "connected":
            try:
                return self._transport.call("get_signal", {"name": name})
            except ApiError as exc:
                if exc.code == "no-data":
                    return None
                raise
        return self._dummy_reading(name)

    def _dummy_reading(self, name: str) -> dict:
        # Timestamps count up from zero instead of reading the wall
        # clock so that seeded runs reproduce byte for byte.
        self._clock += 1
        return {
            "name": name,
            "value": self._rng.random(),
            "observed_at": self._clock,
        }

    # -- results ------------------------------------------------------------

    def publish(self, value: Any) -> int:
        """Append one result value; returns its sequence number."""
        if self.mode == "connected":
            return int(self._transport.call("publish", {"value": value})["seq"])
        seq = self._seq
        body = json.dumps(
            value, sort_keys=True, separators=(",", ":"), ensure_ascii=False
        )
        print(f"publish #{seq} {body}")
        self._seq += 1
        return seq

    # -- state --------------------------------------------------------------

    def put_state(self, blob: bytes) -> None:
        """Replace the task's durable state blob."""
        if not isinstance(blob, (bytes, bytearray)):
            raise TypeError("state must be bytes")
        blob = bytes(blob)
        if self.mode == "connected":
            encoded = base64.b64encode(blob).decode("ascii")
            self._transport.call("put_state", {"blob_b64": encoded})
            return
        if len(blob) > MAX_STATE_BYTES:
            raise ApiError(
                "state-too-large", f"{len(blob)} bytes > {MAX_STATE_BYTES}"
            )
        self._state = blob
        print(f"put_state {len(blob)} bytes")

    def get_state(self) -> bytes | None:
        """The last stored blob, or None before the first put_state."""
        if self.mode == "connected":
            b64 = self._transport.call("get_state", {})["blob_b64"]
            return None if b64 is None else base64.b64decode(b64)
        return self._state


_ctx: PayloadContext | None = None


def context() -> PayloadContext:
    """The process-wide context, built from the environment on first use."""
    global _ctx
    if _ctx is None:
        _ctx = PayloadContext()
    return _ctx


def publish(value: Any) -> int:
    return context().publish(value)


def get_signal(name: str) -> dict | None:
    return context().get_signal(name)


def next_signal(name: str, timeout_ms: int | float | None = None) -> dict:
    return context().next_signal(name, timeout_ms)


def put_state(blob: bytes) -> None:
    context().put_state(blob)


def get_state() -> bytes | None:
    return context().get_state()


def __getattr__(name: str) -> Any:
    # Module attribute, so payload code reads ``sp.parameters["x"]``.
    if name == "parameters":
        return context().parameters
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
