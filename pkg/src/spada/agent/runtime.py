"""The running agent: sync loop wired to sockets, sandboxes and disk.

``core`` decides, this module does.  One event-loop thread owns the
AgentState; everything else (RPC activities, container reconciliation,
the bus listener, sandbox supervisors, the task API) feeds it events
through a queue and never touches the state directly.

Data directory layout:

    outbox.log   durable cache of unconfirmed results and statuses
    objects/     payload/parameters documents fetched from the server
    tasks/<id>/  per-task sandbox workdirs (payload, logs, state.bin)
"""

from __future__ import annotations

import json
import logging
import queue
import threading
from collections import OrderedDict
from pathlib import Path
from typing import Any, Callable

from .. import rpc
from ..bus import BusClient, clock_topic
from ..clocks import WALL_CLOCK, Clock
from ..config import AgentConfig, SignalSourceConfig
from ..model import (
    ClientStateSnapshot,
    TaskStatus,
    TaskSummary,
    check_tree_value,
    clip_error_log,
)
from ..sandbox import ApiError, SandboxRuntime, TaskServices
from ..signals import CsvReplay, RandomSource, SignalPlane, SignalReading
from . import core
from .cache import ClosedTask, DurableCache
from .core import LocalTask, PendingResult, PendingStatus, TaskOutput

logger = logging.getLogger(__name__)

OBJECT_CACHE_CAP = 100

_STOP = object()


class ObjectCache:
    """Documents by id, disk-backed, LRU-capped.

    Payloads and parameters are immutable, so a cached copy is valid
    forever; the cap only bounds disk use.  Concurrent misses for the
    same id coalesce into one fetch so the server sees each document
    requested at most once per cache lifetime.
    """

    def __init__(
        self,
        root: str | Path,
        fetch: Callable[[str, str], dict[str, Any]],
        cap: int = OBJECT_CACHE_CAP,
    ) -> None:
        self._root = Path(root)
        self._root.mkdir(parents=True, exist_ok=True)
        self._fetch = fetch
        self._cap = cap
        self._lock = threading.Lock()
        self._entries: OrderedDict[tuple[str, str], dict[str, Any]] = OrderedDict()
        self._inflight: dict[tuple[str, str], threading.Event] = {}
        for path in sorted(self._root.glob("*.json"), key=lambda p: p.stat().st_mtime):
            kind, _, doc_id = path.stem.partition("-")
            try:
                value = json.loads(path.read_text("utf-8"))
            except (OSError, ValueError):
                path.unlink(missing_ok=True)
                continue
            self._entries[(kind, doc_id)] = value
        self._evict_locked()

    def _path(self, key: tuple[str, str]) -> Path:
        return self._root / f"{key[0]}-{key[1]}.json"

    def _evict_locked(self) -> None:
        while len(self._entries) > self._cap:
            key, _ = self._entries.popitem(last=False)
            self._path(key).unlink(missing_ok=True)

    def get(self, kind: str, doc_id: str) -> dict[str, Any]:
        key = (kind, doc_id)
        while True:
            with self._lock:
                cached = self._entries.get(key)
                if cached is not None:
                    self._entries.move_to_end(key)
                    return cached
                waiter = self._inflight.get(key)
                if waiter is None:
                    self._inflight[key] = threading.Event()
            if waiter is not None:
                waiter.wait(timeout=60)
                continue
            try:
                value = self._fetch(kind, doc_id)
            finally:
                with self._lock:
                    self._inflight.pop(key).set()
            with self._lock:
                self._entries[key] = value
                try:
                    self._path(key).write_text(
                        json.dumps(value, sort_keys=True), "utf-8"
                    )
                except OSError as exc:
                    logger.warning("cannot persist cached %s %s: %s", kind, doc_id, exc)
                self._evict_locked()
            return value

    def payload_body(self, payload_id: str) -> str:
        return self.get("payload", payload_id)["body"]

    def parameters_value(self, parameters_id: str) -> Any:
        return self.get("parameters", parameters_id)["value"]


class _TaskServicesAdapter(TaskServices):
    """Bridges sandbox task-API calls onto the agent's machinery."""

    def __init__(self, service: "AgentService") -> None:
        self._service = service

    def publish(self, task_id: str, value: Any) -> int:
        return self._service._publish(task_id, value)

    def get_parameters(self, task_id: str) -> Any:
        return self._service._task_parameters(task_id)

    def get_signal(self, task_id: str, name: str) -> dict[str, Any] | None:
        return _reading_wire(self._service.signals.get_signal(name, task_id=task_id))

    def next_signal(
        self, task_id: str, name: str, timeout_s: float
    ) -> dict[str, Any] | None:
        return _reading_wire(
            self._service.signals.next_signal(name, timeout_s=timeout_s, task_id=task_id)
        )


def _reading_wire(reading: SignalReading | None) -> dict[str, Any] | None:
    if reading is None:
        return None
    return {
        "name": reading.name,
        "value": reading.value,
        "observed_at": reading.observed_at,
    }


def build_source(cfg: SignalSourceConfig, plane: SignalPlane):
    if cfg.kind == "csv":
        return CsvReplay(plane, cfg.path, speed=cfg.speed, loop=cfg.loop)
    return RandomSource(
        plane,
        cfg.name or "random",
        seed=cfg.seed,
        period_ms=cfg.period_ms,
        low=cfg.low,
        high=cfg.high,
    )


class AgentService:
    """One edge agent: owns its data directory and server connection."""

    def __init__(
        self,
        config: AgentConfig,
        *,
        clock: Clock = WALL_CLOCK,
        fsync: bool = True,
        signal_trace: bool = False,
        plane: SignalPlane | None = None,
    ) -> None:
        self.config = config
        self._clock = clock
        data_dir = Path(config.data_dir)
        data_dir.mkdir(parents=True, exist_ok=True)
        self._cache = DurableCache(data_dir / "outbox.log", fsync=fsync)
        self.signals = plane or SignalPlane(clock=clock, trace=signal_trace)
        self._sources = [build_source(s, self.signals) for s in config.signals]
        self._rpc = rpc.RetryingRpcClient(
            config.server_addr,
            config.token,
            base_s=config.retry_base_s,
            cap_s=config.retry_cap_s,
        )
        self.runtime = SandboxRuntime(
            data_dir,
            _TaskServicesAdapter(self),
            self._on_sandbox_status,
            python_cmd=config.sandbox.python_cmd,
            grace_seconds=config.sandbox.grace_seconds,
        )
        self._objects = ObjectCache(data_dir / "objects", self._fetch_document)
        self._events: queue.Queue = queue.Queue()
        self._state_lock = threading.Lock()
        self._state: core.AgentState | None = None
        # Latest server-active task ids, readable off the event loop; the
        # start path consults it so a cancel that lands mid-reconciliation
        # is never resurrected.
        self._active_view: frozenset[str] = frozenset()
        self._containers_lock = threading.Lock()
        # Tasks whose container start was claimed but has not returned
        # yet; they are absent from runtime.running() until then.
        self._starting: set[str] = set()
        self._meta_lock = threading.Lock()
        self._task_meta: dict[str, tuple[str, str | None]] = {}
        self._stopping = threading.Event()
        self.done = threading.Event()
        self.exit_code = 0
        self._threads: list[threading.Thread] = []
        self._bus_client: BusClient | None = None
        self._started = False

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> None:
        if self._started:
            raise RuntimeError("agent already started")
        self._started = True
        for source in self._sources:
            source.start()
        state, directives = core.initial_state(self._cache.local_tasks())
        self._state = state
        self._spawn(self._event_loop, name="agent-loop")
        self._spawn(self._bootstrap, name="agent-bootstrap", args=(directives,))
        self._spawn(self._bus_loop, name="agent-bus")
        if self.config.refetch_interval_s > 0:
            self._spawn(self._refetch_loop, name="agent-refetch")

    def _spawn(self, target, *, name: str, args: tuple = ()) -> None:
        thread = threading.Thread(target=target, args=args, daemon=True, name=name)
        thread.start()
        self._threads.append(thread)

    def _bootstrap(self, directives: list[core.Directive]) -> None:
        try:
            self._call_server("register_client", {"client_id": self.config.client_id})
        except rpc.RpcTransportError:
            return
        except rpc.RpcError as exc:
            self._fatal(f"cannot register with server: {exc}")
            return
        for directive in directives:
            self._dispatch(directive)

    def stop(self) -> None:
        """Graceful shutdown; sandboxes stopped, workdirs preserved."""
        if self._stopping.is_set():
            return
        self._stopping.set()
        for source in self._sources:
            source.stop()
        self._rpc.close()
        if self._bus_client is not None:
            self._bus_client.close()
        self.runtime.shutdown()
        self._events.put(_STOP)
        for thread in self._threads:
            if thread is not threading.current_thread():
                thread.join(timeout=10)
        self._cache.close()
        self.done.set()

    def _fatal(self, msg: str) -> None:
        logger.error("fatal: %s", msg)
        self.exit_code = 1
        # stop() joins worker threads, so it must not run on one.
        threading.Thread(target=self.stop, daemon=True, name="agent-fatal").start()

    # -- event plumbing ------------------------------------------------------

    def _post(self, event: core.Event) -> None:
        if not self._stopping.is_set():
            self._events.put(event)

    def _event_loop(self) -> None:
        while True:
            event = self._events.get()
            if event is _STOP:
                return
            try:
                with self._state_lock:
                    directives = core.handle_event(self._state, event)
                    self._active_view = frozenset(
                        t.task_id for t in self._state.tasks
                    )
            except Exception:
                logger.exception("event %r crashed the loop; dropped", event)
                continue
            for directive in directives:
                self._dispatch(directive)

    def _dispatch(self, directive: core.Directive) -> None:
        if self._stopping.is_set():
            return
        if isinstance(directive, core.SpawnFetch):
            self._spawn(self._fetch_activity, name="agent-fetch")
        elif isinstance(directive, core.SpawnSubmit):
            self._spawn(
                self._submit_activity, name="agent-submit", args=(directive.batch,)
            )
        elif isinstance(directive, core.SpawnLocalSync):
            self._spawn(
                self._sync_containers,
                name="agent-sync",
                args=(directive.snapshot, directive.local),
            )
        else:
            raise TypeError(f"unknown directive {directive!r}")

    def peek_state(self) -> core.AgentState:
        """Diagnostic snapshot of the loop state (for tests and status)."""
        with self._state_lock:
            state = self._state
            return core.AgentState(
                ts=state.ts,
                tasks=list(state.tasks),
                local=core.clone_locals(state.local),
                syncing_state=state.syncing_state,
                dirty_state=state.dirty_state,
                syncing_locals=state.syncing_locals,
                pending_local_sync=state.pending_local_sync,
            )

    # -- server activities ---------------------------------------------------

    def _call_server(self, method: str, params: dict[str, Any]) -> dict[str, Any]:
        """Call with outage retry; re-registers if the store forgot us."""
        while True:
            try:
                return self._rpc.call(method, params)
            except rpc.RpcError as exc:
                if exc.code == rpc.ERR_NOT_FOUND and method in ("fetch_state", "submit"):
                    logger.warning("server lost registration; re-registering")
                    self._rpc.call(
                        "register_client", {"client_id": self.config.client_id}
                    )
                    continue
                raise

    def _run_activity(self, method: str, params: dict[str, Any]) -> dict[str, Any] | None:
        """Shared error policy: retry outages, die on auth failure."""
        try:
            return self._call_server(method, params)
        except rpc.RpcTransportError:
            return None  # shutting down
        except rpc.RpcError as exc:
            if exc.code == rpc.ERR_UNAUTHENTICATED:
                self._fatal(f"server rejected credentials: {exc}")
            else:
                # A malformed batch would loop forever if retried; give
                # the loop a fresh snapshot instead so it can move on.
                logger.error("%s rejected: %s; refetching", method, exc)
                result = self._run_activity(
                    "fetch_state", {"client_id": self.config.client_id}
                )
                return result
            return None

    def _fetch_activity(self) -> None:
        result = self._run_activity(
            "fetch_state", {"client_id": self.config.client_id}
        )
        if result is not None:
            self._post(core.NewState(ClientStateSnapshot.from_wire(result)))

    def _submit_activity(self, batch: core.SubmitBatch) -> None:
        result = self._run_activity("submit", batch.to_params(self.config.client_id))
        if result is None:
            return
        snapshot = ClientStateSnapshot.from_wire(result)
        for summary in snapshot.tasks:
            self._cache.trim(summary.task_id, summary.result_count)
        self._post(core.NewState(snapshot))

    def _refetch_loop(self) -> None:
        while not self._stopping.wait(self.config.refetch_interval_s):
            self._post(core.RefetchTick())

    def _bus_loop(self) -> None:
        topic = clock_topic(self.config.client_id)
        while not self._stopping.is_set():
            try:
                client = BusClient(self.config.bus_addr)
            except OSError:
                if self._stopping.wait(1.0):
                    return
                continue
            self._bus_client = client
            try:
                client.subscribe(topic)
                for frame in client.frames():
                    ts = frame.get("ts")
                    if isinstance(ts, int) and not isinstance(ts, bool):
                        self._post(core.ClockNotify(ts))
            except Exception:
                logger.debug("bus connection dropped", exc_info=True)
            finally:
                client.close()
            if self._stopping.wait(1.0):
                return

    # -- container reconciliation --------------------------------------------

    def _sync_containers(
        self, snapshot: ClientStateSnapshot, local: dict[str, LocalTask]
    ) -> None:
        server: dict[str, TaskSummary] = {t.task_id: t for t in snapshot.tasks}
        for tid in sorted(local):
            if tid in server:
                continue
            # Left the active set: canceled or terminal-confirmed.  Stop
            # without emitting a status and delete every local trace.
            local.pop(tid)
            with self._containers_lock:
                self.runtime.stop(tid, wipe=True)
            self._cache.drop(tid)
            with self._meta_lock:
                self._task_meta.pop(tid, None)
        to_start: list[str] = []
        for tid, summary in server.items():
            entry = local.get(tid)
            if entry is None:
                entry = LocalTask(task_id=tid, submitted_count=summary.result_count)
                local[tid] = entry
            entry.payload_id = summary.payload_id
            entry.parameters_id = summary.parameters_id
            with self._meta_lock:
                self._task_meta[tid] = (summary.payload_id, summary.parameters_id)
            self._cache.note_task(tid, summary.payload_id, summary.parameters_id)
            if entry.pending_status is not None:
                continue  # already exited; awaiting server confirmation
            # Reconciles overlap with the tail of the previous pass:
            # LocalsSynced is posted before the starts run, so the next
            # pass can arrive while a start is still in flight.  Claim
            # atomically or the task gets two containers.
            with self._containers_lock:
                claimed = (
                    tid not in self.runtime.running()
                    and tid not in self._starting
                )
                if claimed:
                    self._starting.add(tid)
            entry.running = True
            if claimed:
                to_start.append(tid)
        # The loop must know these tasks before their first publish can
        # arrive, so the reconciled map is posted before any start.
        self._post(core.LocalsSynced(core.clone_locals(local)))
        for tid in to_start:
            self._start_task(tid, local[tid])

    def _start_task(self, tid: str, entry: LocalTask) -> None:
        try:
            body = self._objects.payload_body(entry.payload_id)
            with self._containers_lock:
                if tid not in self._active_view:
                    logger.info("task %s canceled before start; skipped", tid)
                    return
                self.runtime.start(tid, body)
        except Exception as exc:
            if self._stopping.is_set():
                return
            logger.error("cannot start task %s: %s", tid, exc)
            self._on_sandbox_status(
                tid,
                PendingStatus(
                    TaskStatus.ERROR,
                    clip_error_log(f"task failed to start: {exc}"),
                ),
            )
        finally:
            with self._containers_lock:
                self._starting.discard(tid)

    # -- output sinks (called from sandbox threads) ---------------------------

    def _publish(self, task_id: str, value: Any) -> int:
        check_tree_value(value)
        produced_at = self._clock.now_ms()
        try:
            seq = self._cache.append_result(task_id, value, produced_at)
        except ClosedTask:
            raise ApiError("task-closed", "task is no longer active") from None
        self._post(
            TaskOutput(
                task_id,
                result=PendingResult(seq=seq, value=value, produced_at=produced_at),
            )
        )
        return seq

    def _on_sandbox_status(self, task_id: str, status: PendingStatus) -> None:
        try:
            self._cache.append_status(task_id, status.status, status.error_log)
        except ClosedTask:
            return
        self._post(TaskOutput(task_id, status=status))

    def _task_parameters(self, task_id: str) -> Any:
        with self._meta_lock:
            meta = self._task_meta.get(task_id)
        if meta is None or meta[1] is None:
            return None
        return self._objects.parameters_value(meta[1])

    def _fetch_document(self, kind: str, doc_id: str) -> dict[str, Any]:
        if kind == "payload":
            return self._call_server("get_payload", {"payload_id": doc_id})["payload"]
        return self._call_server("get_parameters", {"parameters_id": doc_id})[
            "parameters"
        ]


__all__ = ["AgentService", "ObjectCache", "build_source"]
