"""Process-level sandboxes that run payload code.

Each task gets its own interpreter process, private working directory
and a unix-socket task API.  Isolation is deliberately process-level:
separate process group, scrubbed environment, advisory rlimits, and
unguessable per-task paths.  Kernel-grade containment would slot in
here behind the same start/stop surface.

Task API protocol, one JSON object per line over the socket named by
SPADA_TASK_API:

    -> {"id": 1, "method": "publish", "params": {"value": ...}}
    <- {"id": 1, "ok": {"seq": 0}}
    <- {"id": 1, "err": {"code": "task-closed", "msg": "..."}}

Methods: publish, get_parameters, put_state, get_state, get_signal,
next_signal.  Intermediate state lives in the workdir as state.bin and
survives agent restarts; the workdir is wiped only when the task
reaches a terminal status.
"""

from __future__ import annotations

import base64
import ctypes
import logging
import os
import queue
import shutil
import signal as signal_mod
import socket
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol

from . import wire
from .agent.core import PendingStatus
from .model import TaskStatus, clip_error_log

logger = logging.getLogger(__name__)

MAX_STATE_BYTES = 16 * 1024 * 1024
LOG_TAIL_BYTES = 32 * 1024

PAYLOAD_FILE = "payload.py"
STATE_FILE = "state.bin"
STDOUT_LOG = "stdout.log"
STDERR_LOG = "stderr.log"

API_ENV_VAR = "SPADA_TASK_API"
TASK_ID_ENV_VAR = "SPADA_TASK_ID"

PR_SET_PDEATHSIG = 1


class TaskServices(Protocol):
    """What the surrounding agent provides to one task's API."""

    def publish(self, task_id: str, value: Any) -> int: ...
    def get_parameters(self, task_id: str) -> Any: ...
    def get_signal(self, task_id: str, name: str) -> dict[str, Any] | None: ...
    def next_signal(
        self, task_id: str, name: str, timeout_s: float
    ) -> dict[str, Any] | None: ...


class SandboxError(Exception):
    pass


@dataclass(slots=True)
class SandboxLimits:
    """Advisory resource caps applied before exec; None means unset."""

    cpu_seconds: int | None = None
    memory_bytes: int | None = None
    wall_seconds: float | None = None


@dataclass
class _Sandbox:
    task_id: str
    workdir: Path
    sock_dir: Path
    proc: subprocess.Popen
    listener: socket.socket
    canceled: bool = False
    timed_out: bool = False
    force_killed: bool = False
    closed: bool = False
    api_lock: threading.Lock = field(default_factory=threading.Lock)
    supervisor: threading.Thread | None = None
    wall_timer: threading.Timer | None = None


def _preexec(limits: SandboxLimits) -> Callable[[], None]:
    def apply() -> None:
        os.setsid()
        try:
            # Die with the agent rather than orphaning.
            libc = ctypes.CDLL(None, use_errno=True)
            libc.prctl(PR_SET_PDEATHSIG, signal_mod.SIGKILL)
        except Exception:
            pass
        try:
            import resource

            if limits.cpu_seconds is not None:
                resource.setrlimit(
                    resource.RLIMIT_CPU, (limits.cpu_seconds, limits.cpu_seconds)
                )
            if limits.memory_bytes is not None:
                resource.setrlimit(
                    resource.RLIMIT_AS, (limits.memory_bytes, limits.memory_bytes)
                )
        except Exception:
            pass

    return apply


class SandboxRuntime:
    """Starts, supervises and stops payload processes for one agent."""

    def __init__(
        self,
        root_dir: str | Path,
        services: TaskServices,
        on_status: Callable[[str, PendingStatus], None],
        *,
        python_cmd: str | None = None,
        grace_seconds: float = 5.0,
        limits: SandboxLimits | None = None,
        extra_env: dict[str, str] | None = None,
    ) -> None:
        self._root = Path(root_dir)
        (self._root / "tasks").mkdir(parents=True, exist_ok=True)
        self._services = services
        self._on_status = on_status
        self._python = python_cmd or sys.executable
        self._grace = grace_seconds
        self._limits = limits or SandboxLimits()
        self._extra_env = dict(extra_env or {})
        self._lock = threading.Lock()
        self._live: dict[str, _Sandbox] = {}
        # All children are forked from this one long-lived thread: the
        # parent-death signal set in _preexec fires when the *thread*
        # that spawned the child exits, so launching from short-lived
        # worker threads would SIGKILL the payload instantly.
        self._launches: queue.Queue = queue.Queue()
        self._closed = False
        threading.Thread(
            target=self._launch_loop, daemon=True, name="sandbox-launch"
        ).start()

    def workdir(self, task_id: str) -> Path:
        return self._root / "tasks" / task_id

    def running(self) -> set[str]:
        with self._lock:
            return {t for t, sb in self._live.items() if not sb.closed}

    # -- lifecycle ----------------------------------------------------------

    def start(self, task_id: str, payload_body: str) -> None:
        """Launch the payload; raises SandboxError if it cannot start."""
        if self._closed:
            raise SandboxError("runtime is shut down")
        done = threading.Event()
        box: list[BaseException | None] = [None]
        self._launches.put((task_id, payload_body, done, box))
        done.wait()
        if box[0] is not None:
            raise box[0]

    def _launch_loop(self) -> None:
        while True:
            item = self._launches.get()
            if item is None:
                # Fail anything that raced the shutdown.
                while True:
                    try:
                        _, _, done, box = self._launches.get_nowait()
                    except queue.Empty:
                        return
                    box[0] = SandboxError("runtime is shut down")
                    done.set()
            task_id, payload_body, done, box = item
            try:
                self._do_start(task_id, payload_body)
            except BaseException as exc:
                box[0] = exc
            done.set()

    def _do_start(self, task_id: str, payload_body: str) -> None:
        with self._lock:
            stale = self._live.get(task_id)
            if stale is not None and stale.proc.poll() is None:
                raise SandboxError(f"task {task_id} already running")
        if stale is not None:
            # Previous run exited; release its API before relaunching.
            self._close_api(stale)
            with self._lock:
                self._live.pop(task_id, None)
        workdir = self.workdir(task_id)
        workdir.mkdir(parents=True, exist_ok=True)
        (workdir / PAYLOAD_FILE).write_text(payload_body, "utf-8")
        # AF_UNIX paths are length-limited, so the socket lives in a
        # short private tmp dir rather than under the data dir.
        sock_dir = Path(tempfile.mkdtemp(prefix="spada-api-"))
        sock_path = sock_dir / "api.sock"
        listener = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        try:
            listener.bind(str(sock_path))
            listener.listen(4)
            env = {
                "PATH": os.environ.get("PATH", "/usr/bin:/bin"),
                "HOME": str(workdir),
                "TMPDIR": str(workdir),
                API_ENV_VAR: str(sock_path),
                TASK_ID_ENV_VAR: task_id,
                **self._extra_env,
            }
            stdout = open(workdir / STDOUT_LOG, "ab")
            stderr = open(workdir / STDERR_LOG, "ab")
            try:
                proc = subprocess.Popen(
                    [self._python, PAYLOAD_FILE],
                    cwd=str(workdir),
                    env=env,
                    stdout=stdout,
                    stderr=stderr,
                    stdin=subprocess.DEVNULL,
                    preexec_fn=_preexec(self._limits),
                )
            finally:
                stdout.close()
                stderr.close()
        except OSError as exc:
            listener.close()
            shutil.rmtree(sock_dir, ignore_errors=True)
            raise SandboxError(f"cannot start payload: {exc}") from exc
        sandbox = _Sandbox(
            task_id=task_id,
            workdir=workdir,
            sock_dir=sock_dir,
            proc=proc,
            listener=listener,
        )
        with self._lock:
            self._live[task_id] = sandbox
        threading.Thread(
            target=self._accept_loop, args=(sandbox,), daemon=True,
            name=f"api-{task_id[:8]}",
        ).start()
        sandbox.supervisor = threading.Thread(
            target=self._supervise, args=(sandbox,), daemon=True,
            name=f"supervise-{task_id[:8]}",
        )
        sandbox.supervisor.start()
        if self._limits.wall_seconds is not None:
            sandbox.wall_timer = threading.Timer(
                self._limits.wall_seconds, self._wall_expired, args=(sandbox,)
            )
            sandbox.wall_timer.daemon = True
            sandbox.wall_timer.start()

    def _wall_expired(self, sandbox: _Sandbox) -> None:
        if sandbox.proc.poll() is None:
            sandbox.timed_out = True
            self._kill_group(sandbox, signal_mod.SIGKILL)

    def _supervise(self, sandbox: _Sandbox) -> None:
        rc = sandbox.proc.wait()
        if sandbox.wall_timer is not None:
            sandbox.wall_timer.cancel()
        if sandbox.canceled:
            return
        if sandbox.timed_out:
            status = PendingStatus(
                TaskStatus.ERROR,
                clip_error_log(
                    f"wall clock limit exceeded\n{self._log_tail(sandbox)}"
                ),
            )
        elif rc == 0:
            status = PendingStatus(TaskStatus.FINISHED)
        else:
            status = PendingStatus(
                TaskStatus.ERROR,
                clip_error_log(
                    f"payload exited with code {rc}\n{self._log_tail(sandbox)}"
                ),
            )
        try:
            self._on_status(sandbox.task_id, status)
        except Exception:
            logger.exception("status sink failed for %s", sandbox.task_id)

    @staticmethod
    def _tail(path: Path) -> str:
        try:
            with open(path, "rb") as fh:
                fh.seek(0, os.SEEK_END)
                size = fh.tell()
                fh.seek(max(0, size - LOG_TAIL_BYTES))
                return fh.read().decode("utf-8", errors="replace")
        except OSError:
            return ""

    def _log_tail(self, sandbox: _Sandbox) -> str:
        err = self._tail(sandbox.workdir / STDERR_LOG)
        out = self._tail(sandbox.workdir / STDOUT_LOG)
        parts = []
        if err:
            parts.append(f"--- stderr ---\n{err}")
        if out:
            parts.append(f"--- stdout ---\n{out}")
        return "\n".join(parts)

    def _kill_group(self, sandbox: _Sandbox, sig: int) -> None:
        try:
            os.killpg(os.getpgid(sandbox.proc.pid), sig)
        except (ProcessLookupError, PermissionError):
            pass

    def stop(self, task_id: str, *, wipe: bool) -> None:
        """Stop without reporting a status (cancel or agent shutdown).

        SIGTERM first, SIGKILL after the grace period.  With ``wipe``
        the workdir (payload, logs, intermediate state) is deleted.
        """
        with self._lock:
            sandbox = self._live.get(task_id)
        if sandbox is not None:
            sandbox.canceled = True
            if sandbox.proc.poll() is None:
                self._kill_group(sandbox, signal_mod.SIGTERM)
                deadline = time.monotonic() + self._grace
                while sandbox.proc.poll() is None and time.monotonic() < deadline:
                    time.sleep(0.02)
                if sandbox.proc.poll() is None:
                    sandbox.force_killed = True
                    self._kill_group(sandbox, signal_mod.SIGKILL)
                    sandbox.proc.wait()
            if sandbox.supervisor is not None:
                sandbox.supervisor.join(timeout=5)
            self._close_api(sandbox)
            with self._lock:
                self._live.pop(task_id, None)
        if wipe:
            shutil.rmtree(self.workdir(task_id), ignore_errors=True)

    def discard(self, task_id: str) -> None:
        """Forget a task that is not running: wipe its workdir."""
        self.stop(task_id, wipe=True)

    def shutdown(self) -> None:
        """Silently stop everything, keeping workdirs for a later resume."""
        self._closed = True
        self._launches.put(None)
        for task_id in list(self.running()):
            self.stop(task_id, wipe=False)

    def was_force_killed(self, task_id: str) -> bool:
        with self._lock:
            sandbox = self._live.get(task_id)
        return sandbox.force_killed if sandbox is not None else False

    def _close_api(self, sandbox: _Sandbox) -> None:
        if sandbox.closed:
            return
        sandbox.closed = True
        try:
            sandbox.listener.close()
        except OSError:
            pass
        shutil.rmtree(sandbox.sock_dir, ignore_errors=True)

    # -- intermediate state -------------------------------------------------

    def put_state(self, task_id: str, blob: bytes) -> None:
        if len(blob) > MAX_STATE_BYTES:
            raise SandboxError(f"state blob exceeds {MAX_STATE_BYTES} bytes")
        workdir = self.workdir(task_id)
        workdir.mkdir(parents=True, exist_ok=True)
        tmp = workdir / (STATE_FILE + ".tmp")
        tmp.write_bytes(blob)
        tmp.replace(workdir / STATE_FILE)

    def get_state(self, task_id: str) -> bytes | None:
        path = self.workdir(task_id) / STATE_FILE
        try:
            return path.read_bytes()
        except FileNotFoundError:
            return None

    # -- task API serving ---------------------------------------------------

    def _accept_loop(self, sandbox: _Sandbox) -> None:
        while not sandbox.closed:
            try:
                conn, _ = sandbox.listener.accept()
            except OSError:
                return
            threading.Thread(
                target=self._serve_conn, args=(sandbox, conn), daemon=True
            ).start()

    def _serve_conn(self, sandbox: _Sandbox, conn: socket.socket) -> None:
        rfile = conn.makefile("rb")
        try:
            while True:
                try:
                    request = wire.read_line_value(rfile)
                except (EOFError, OSError, wire.WireError):
                    return
                response = self._dispatch_api(sandbox, request)
                try:
                    conn.sendall(wire.encode_line(response))
                except OSError:
                    return
        finally:
            try:
                rfile.close()
                conn.close()
            except OSError:
                pass

    def _dispatch_api(self, sandbox: _Sandbox, request: Any) -> dict[str, Any]:
        req_id = request.get("id") if isinstance(request, dict) else None
        if (
            not isinstance(request, dict)
            or not isinstance(request.get("method"), str)
        ):
            return {
                "id": req_id,
                "err": {"code": "invalid-argument", "msg": "malformed request"},
            }
        params = request.get("params") or {}
        if not isinstance(params, dict):
            return {
                "id": req_id,
                "err": {"code": "invalid-argument", "msg": "params must be an object"},
            }
        # One task's calls are answered serially even if the payload
        # opens several connections.
        with sandbox.api_lock:
            if sandbox.closed or sandbox.canceled:
                return {
                    "id": req_id,
                    "err": {"code": "task-closed", "msg": "task is stopping"},
                }
            try:
                ok = self._call_method(sandbox, request["method"], params)
            except ApiError as exc:
                return {"id": req_id, "err": {"code": exc.code, "msg": exc.msg}}
            except Exception:
                logger.exception("task API crashed on %s", request["method"])
                return {
                    "id": req_id,
                    "err": {"code": "invalid-argument", "msg": "internal error"},
                }
            return {"id": req_id, "ok": ok}

    def _call_method(
        self, sandbox: _Sandbox, method: str, params: dict[str, Any]
    ) -> dict[str, Any]:
        tid = sandbox.task_id
        if method == "publish":
            if "value" not in params:
                raise ApiError("invalid-argument", "publish needs a value")
            try:
                seq = self._services.publish(tid, params["value"])
            except ValueError as exc:
                raise ApiError("invalid-argument", str(exc)) from exc
            return {"seq": seq}
        if method == "get_parameters":
            value = self._services.get_parameters(tid)
            if value is None:
                raise ApiError("no-parameters", "task has no parameters document")
            return {"value": value}
        if method == "put_state":
            blob_b64 = params.get("blob_b64")
            if not isinstance(blob_b64, str):
                raise ApiError("invalid-argument", "put_state needs blob_b64")
            try:
                blob = base64.b64decode(blob_b64, validate=True)
            except Exception as exc:
                raise ApiError("invalid-argument", f"bad base64: {exc}") from exc
            if len(blob) > MAX_STATE_BYTES:
                raise ApiError(
                    "state-too-large", f"cap is {MAX_STATE_BYTES} bytes"
                )
            self.put_state(tid, blob)
            return {}
        if method == "get_state":
            blob = self.get_state(tid)
            return {
                "blob_b64": None if blob is None else base64.b64encode(blob).decode()
            }
        if method == "get_signal":
            name = params.get("name")
            if not isinstance(name, str):
                raise ApiError("invalid-argument", "get_signal needs a name")
            reading = self._services.get_signal(tid, name)
            if reading is None:
                raise ApiError("no-data", f"no value cached for {name!r}")
            return reading
        if method == "next_signal":
            name = params.get("name")
            if not isinstance(name, str):
                raise ApiError("invalid-argument", "next_signal needs a name")
            timeout_ms = params.get("timeout_ms", 60_000)
            if not isinstance(timeout_ms, (int, float)) or timeout_ms <= 0:
                raise ApiError("invalid-argument", "timeout_ms must be positive")
            reading = self._services.next_signal(tid, name, float(timeout_ms) / 1000.0)
            if reading is None:
                raise ApiError("timeout", f"no fresh value for {name!r}")
            return reading
        raise ApiError("invalid-argument", f"unknown method {method!r}")


class ApiError(Exception):
    def __init__(self, code: str, msg: str) -> None:
        super().__init__(f"{code}: {msg}")
        self.code = code
        self.msg = msg
