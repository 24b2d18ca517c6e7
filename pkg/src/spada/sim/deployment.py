"""A whole deployment on virtual time.

The server side is the real thing: a MemoryStore behind a ServerNode.
The agent side reuses the real sync-loop state machine and the real
durable outbox; only the parts that are inherently about wall time and
operating-system processes (threads, sockets, sandboxes) are replaced
with scheduled callbacks, so a run is deterministic and a simulated
crash behaves like a killed process: everything except the outbox file
vanishes.

Message handling mirrors the wire: a request is "sent" synchronously
when the agent issues it (a crash after that cannot unsend it), the
server applies it at the delivery instant, and the response callback
is dropped if the agent process died in the meantime.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Callable

from ..agent import core
from ..agent.cache import DurableCache
from ..model import ClientStateSnapshot, TaskStatus
from ..rpc import RpcError
from ..server import ROLE_CLIENT, ROLE_USER, ServerNode, TokenRegistry
from ..store import MemoryStore
from .clock import SimClock
from .net import FaultSchedule, SimNet

logger = logging.getLogger(__name__)

CLIENT_TOKEN = "sim-client"
USER_TOKEN = "sim-user"

# Virtual durations, in milliseconds.
LOCAL_SYNC_MS = 2
CONTAINER_START_MS = 25
PRODUCE_INTERVAL_MS = 150
RESTART_DOWN_MS = 800
REFETCH_INTERVAL_MS = 3000
RETRY_BASE_MS = 200
RETRY_CAP_MS = 2000


class SimError(AssertionError):
    """The simulation caught the system in an illegal state."""


class _NotifyRouter:
    """Stands in for the notification bus: retained clock frames to
    agents, assignment events recorded in the trace only."""

    def __init__(self, world: "SimWorld") -> None:
        self._world = world
        self._retained: dict[str, int] = {}

    # ServerNode's bus surface.

    def publish_clock(self, client_id: str, ts: int) -> None:
        self._retained[client_id] = max(self._retained.get(client_id, 0), ts)
        agent = self._world.agents.get(client_id)
        if agent is None:
            return
        if self._world.net.drop_notification():
            self._world.trace("notify-drop", client=client_id, ts=ts)
            return
        delay = self._world.net.delay_ms()

        def deliver() -> None:
            if agent.up and agent.state is not None:
                self._world.trace("notify", client=client_id, ts=ts)
                agent.handle(core.ClockNotify(ts))

        self._world.clock.schedule(delay, deliver)

    def publish_event(self, topic: str, event: dict[str, Any]) -> None:
        self._world.trace(
            "bus-event", topic=topic, event=event.get("kind"),
            task=event.get("task_id"),
        )

    # Subscription replay when an agent (re)connects.

    def attach(self, agent: "SimAgent") -> None:
        retained = self._retained.get(agent.client_id)
        if retained:
            agent.handle(core.ClockNotify(retained))


class SimWorld:
    def __init__(
        self,
        schedule: FaultSchedule,
        root: str | Path,
        client_ids: list[str],
        *,
        results_per_task: int,
        refetch_enabled: bool = True,
    ) -> None:
        self.schedule = schedule
        self.root = Path(root)
        self.clock = SimClock()
        self.net = SimNet(schedule)
        self.store = MemoryStore(now_ms=self.clock.now_ms)
        self.router = _NotifyRouter(self)
        self.node = ServerNode(
            self.store,
            self.router,
            TokenRegistry({CLIENT_TOKEN: ROLE_CLIENT, USER_TOKEN: ROLE_USER}),
        )
        self.results_per_task = results_per_task
        self.refetch_enabled = refetch_enabled
        self.events: list[dict[str, Any]] = []
        # Every (task_id, seq) ever written to an outbox, with its value.
        self.produced: dict[tuple[str, int], Any] = {}
        self.publish_counts: dict[str, int] = {}
        # (client_id, nth publish on that client, window) -> crash there.
        self.crash_plan: dict[tuple[str, int], str] = {}
        self.agents = {
            cid: SimAgent(self, cid, self.root / cid) for cid in client_ids
        }
        for cid in client_ids:
            self.store.register_client(cid)

    # -- bookkeeping ---------------------------------------------------------

    def trace(self, kind: str, **fields: Any) -> None:
        self.events.append({"t": self.clock.now_ms(), "ev": kind, **fields})

    def start(self) -> None:
        for agent in self.agents.values():
            agent.start()
        for client_id, at_ms in self.schedule.agent_restarts:
            agent = self.agents.get(client_id)
            if agent is None:
                continue
            self.clock.schedule(at_ms, lambda a=agent: a.crash_and_restart())

    def commit(self, params: dict[str, Any]) -> dict[str, Any]:
        # User-side traffic is not under test; commits apply directly.
        out = self.node.handle("user_commit", params, USER_TOKEN)
        self.trace("commit", tasks=sorted(out["task_ids"]))
        return out

    def close(self) -> None:
        for agent in self.agents.values():
            if agent.cache is not None:
                agent.cache.close()
                agent.cache = None

    # -- crash windows for the durability drill ------------------------------

    def plan_crash(self, client_id: str, nth_publish: int, window: str) -> None:
        if window not in ("before-submit", "after-delivery"):
            raise ValueError(f"unknown crash window {window!r}")
        self.crash_plan[(client_id, nth_publish)] = window

    def _take_crash_window(self, client_id: str) -> str | None:
        n = self.publish_counts.get(client_id, 0) + 1
        self.publish_counts[client_id] = n
        return self.crash_plan.pop((client_id, n), None)


class SimAgent:
    def __init__(self, world: SimWorld, client_id: str, data_dir: Path) -> None:
        self.world = world
        self.client_id = client_id
        self.data_dir = Path(data_dir)
        self.up = False
        self.epoch = 0
        self.cache: DurableCache | None = None
        self.state: core.AgentState | None = None
        self.inflight = 0  # fetch or submit activities outstanding
        self.reconciling = False
        self._running: set[str] = set()
        self._task_gen: dict[str, int] = {}
        self._crash_on_submit_delivery = False

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> None:
        if self.up:
            return
        self.up = True
        self.epoch += 1
        self.inflight = 0
        self.reconciling = False
        self._running.clear()
        self._crash_on_submit_delivery = False
        self.cache = DurableCache(self.data_dir / "outbox.log", fsync=False)
        self.world.trace("agent-start", client=self.client_id)
        self._rpc("register_client", {"client_id": self.client_id}, self._booted)

    def _booted(self, out: dict[str, Any]) -> None:
        state, directives = core.initial_state(self.cache.local_tasks())
        self.state = state
        self._dispatch(directives)
        self.world.router.attach(self)
        if self.world.refetch_enabled:
            self._schedule_refetch()

    def crash(self) -> None:
        """Die like a killed process: only the outbox file survives."""
        if not self.up:
            return
        self.up = False
        self.epoch += 1
        self.state = None
        self.inflight = 0
        self.reconciling = False
        self._running.clear()
        self._task_gen.clear()
        self.cache.close()
        self.cache = None
        self.world.trace("agent-crash", client=self.client_id)

    def crash_and_restart(self, down_ms: int = RESTART_DOWN_MS) -> None:
        self.crash()
        self.world.clock.schedule(down_ms, self.start)

    def _schedule_refetch(self) -> None:
        epoch = self.epoch

        def tick() -> None:
            if not self.up or self.epoch != epoch:
                return
            self.handle(core.RefetchTick())
            self.world.clock.schedule(REFETCH_INTERVAL_MS, tick)

        self.world.clock.schedule(REFETCH_INTERVAL_MS, tick)

    # -- the loop ------------------------------------------------------------

    def handle(self, event: core.Event) -> None:
        if not self.up or self.state is None:
            return
        self._dispatch(core.handle_event(self.state, event))

    def _dispatch(self, directives: list[core.Directive]) -> None:
        for directive in directives:
            if isinstance(directive, core.SpawnFetch):
                self._begin_activity("fetch")
                self._rpc(
                    "fetch_state", {"client_id": self.client_id}, self._fetch_done
                )
            elif isinstance(directive, core.SpawnSubmit):
                self._begin_activity("submit")
                self._rpc(
                    "submit",
                    directive.batch.to_params(self.client_id),
                    self._submit_done,
                )
            elif isinstance(directive, core.SpawnLocalSync):
                self._begin_reconcile(directive.snapshot, directive.local)
            else:
                raise SimError(f"unknown directive {directive!r}")

    def _begin_activity(self, kind: str) -> None:
        if self.inflight:
            raise SimError(f"{self.client_id}: second {kind} while one in flight")
        self.inflight = 1

    def _fetch_done(self, out: dict[str, Any]) -> None:
        self.inflight = 0
        self.handle(core.NewState(ClientStateSnapshot.from_wire(out)))

    def _submit_done(self, out: dict[str, Any]) -> None:
        self.inflight = 0
        snapshot = ClientStateSnapshot.from_wire(out)
        for summary in snapshot.tasks:
            self.cache.trim(summary.task_id, summary.result_count)
        self.handle(core.NewState(snapshot))

    # -- simulated rpc -------------------------------------------------------

    def _rpc(
        self,
        method: str,
        params: dict[str, Any],
        on_ok: Callable[[dict[str, Any]], None],
        attempt: int = 0,
    ) -> None:
        world = self.world
        epoch = self.epoch
        send_t = world.clock.now_ms()
        d_req = world.net.delay_ms()
        d_resp = world.net.delay_ms()

        def fail_later(after_ms: int) -> None:
            backoff = min(RETRY_BASE_MS * (2 ** attempt), RETRY_CAP_MS)

            def retry() -> None:
                if self.up and self.epoch == epoch:
                    self._rpc(method, params, on_ok, attempt + 1)

            world.trace("rpc-fail", client=self.client_id, method=method)
            world.clock.schedule(after_ms + backoff, retry)

        if world.net.rpc_blocked(send_t, self.client_id):
            fail_later(d_req)
            return

        def deliver() -> None:
            # The frame was sent while the agent lived; the server sees
            # it even if the sender has died since.
            if world.net.rpc_blocked(world.clock.now_ms(), self.client_id):
                fail_later(d_resp)
                return
            try:
                out = world.node.handle(method, params, CLIENT_TOKEN)
            except RpcError as exc:
                raise SimError(
                    f"{self.client_id}: {method} rejected: {exc.code}: {exc.msg}"
                ) from exc
            if (
                method == "submit"
                and self.epoch == epoch
                and self._crash_on_submit_delivery
            ):
                self._crash_on_submit_delivery = False
                self.world.trace("crash-window", client=self.client_id,
                                 window="after-delivery")
                self.crash_and_restart()

            def respond() -> None:
                if self.up and self.epoch == epoch:
                    on_ok(out)

            world.clock.schedule(d_resp, respond)

        world.clock.schedule(d_req, deliver)

    # -- simulated containers ------------------------------------------------

    def _begin_reconcile(
        self, snapshot: ClientStateSnapshot, local: dict[str, core.LocalTask]
    ) -> None:
        epoch = self.epoch
        self.reconciling = True

        def run() -> None:
            if not self.up or self.epoch != epoch:
                return
            self.reconciling = False
            self._reconcile(snapshot, local)

        self.world.clock.schedule(LOCAL_SYNC_MS, run)

    def _reconcile(
        self, snapshot: ClientStateSnapshot, local: dict[str, core.LocalTask]
    ) -> None:
        active = {t.task_id: t for t in snapshot.tasks}
        for tid in [t for t in local if t not in active]:
            local.pop(tid)
            self._stop_container(tid)
            self.cache.drop(tid)
        to_start = []
        for tid, summary in active.items():
            entry = local.get(tid)
            if entry is None:
                entry = core.LocalTask(task_id=tid)
                local[tid] = entry
            entry.payload_id = summary.payload_id
            entry.parameters_id = summary.parameters_id
            self.cache.note_task(tid, summary.payload_id, summary.parameters_id)
            if entry.pending_status is not None:
                continue  # already terminal locally; only submission remains
            if entry.running and tid in self._running:
                continue
            entry.running = True
            to_start.append(tid)
        # The loop must know the reconciled map before any container
        # output can race in.
        self.handle(core.LocalsSynced(core.clone_locals(local)))
        for tid in to_start:
            self._start_container(tid)

    def _start_container(self, tid: str) -> None:
        self._running.add(tid)
        gen = self._task_gen.get(tid, 0) + 1
        self._task_gen[tid] = gen
        self.world.trace("container-start", client=self.client_id, task=tid)
        self.world.clock.schedule(
            CONTAINER_START_MS, lambda: self._produce(tid, gen)
        )

    def _stop_container(self, tid: str) -> None:
        self._running.discard(tid)
        self._task_gen[tid] = self._task_gen.get(tid, 0) + 1

    def _produce(self, tid: str, gen: int) -> None:
        if (
            not self.up
            or self._task_gen.get(tid) != gen
            or tid not in self._running
        ):
            return
        done = self.cache.next_seq(tid)
        if done >= self.world.results_per_task:
            self.cache.append_status(tid, TaskStatus.FINISHED)
            self._running.discard(tid)
            self.world.trace("container-finish", client=self.client_id, task=tid)
            self.handle(
                core.TaskOutput(
                    task_id=tid,
                    status=core.PendingStatus(status=TaskStatus.FINISHED),
                )
            )
            return
        now = self.world.clock.now_ms()
        value = {"task": tid, "n": done}
        seq = self.cache.append_result(tid, value, produced_at=now)
        key = (tid, seq)
        if key in self.world.produced:
            # The outbox makes seqs unique across restarts; a repeat
            # means durable state was lost.
            raise SimError(f"{self.client_id}: {tid} seq {seq} produced twice")
        self.world.produced[key] = value
        self.world.trace("produce", client=self.client_id, task=tid, seq=seq)
        window = self.world._take_crash_window(self.client_id)
        if window == "before-submit":
            # Killed between the outbox write and the submit: the
            # result exists only in the log.
            self.world.trace("crash-window", client=self.client_id,
                             window=window)
            self.crash_and_restart()
            return
        if window == "after-delivery":
            # Die once the submit frame reaches the server, before the
            # response comes back: the replay must deduplicate.
            self._crash_on_submit_delivery = True
        self.handle(
            core.TaskOutput(
                task_id=tid,
                result=core.PendingResult(seq=seq, value=value, produced_at=now),
            )
        )
        self.world.clock.schedule(
            PRODUCE_INTERVAL_MS, lambda: self._produce(tid, gen)
        )
