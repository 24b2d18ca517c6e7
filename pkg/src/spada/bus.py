"""Notification fan-out: retained per-client clock topics plus event
topics for user-facing streams.

Delivery is lossy, at most once: a slow subscriber's queue fills and
frames are dropped.  Correctness never depends on a notification
arriving; clock topics retain their last value so a (re)connecting
subscriber immediately learns the newest clock, and agents refetch
periodically regardless.

A small line-oriented socket front end exposes the bus to processes
that are not the server: agents subscribe to their clock topic, user
tooling to assignment event topics.
"""

from __future__ import annotations

import logging
import queue
import socket
import threading
from typing import Any, Iterator

from . import wire

logger = logging.getLogger(__name__)

SUBSCRIBER_QUEUE_DEPTH = 512


def clock_topic(client_id: str) -> str:
    return f"clients/{client_id}/clock"


def assignment_topic(assignment_id: str) -> str:
    return f"assignments/{assignment_id}/events"


class Subscription:
    """One subscriber's frame queue; iterate or poll with a timeout."""

    def __init__(self, bus: "InProcessBus", topics: tuple[str, ...]) -> None:
        self._bus = bus
        self.topics = topics
        self._queue: queue.Queue[Any] = queue.Queue(maxsize=SUBSCRIBER_QUEUE_DEPTH)
        self.closed = False

    def _offer(self, frame: dict[str, Any]) -> None:
        try:
            self._queue.put_nowait(frame)
        except queue.Full:
            logger.warning("subscriber queue full, dropping frame on %s", frame.get("topic"))

    def get(self, timeout: float | None = None) -> dict[str, Any] | None:
        try:
            return self._queue.get(timeout=timeout)
        except queue.Empty:
            return None

    def __iter__(self) -> Iterator[dict[str, Any]]:
        while not self.closed:
            frame = self.get(timeout=0.5)
            if frame is not None:
                yield frame

    def close(self) -> None:
        self.closed = True
        self._bus._drop(self)


class InProcessBus:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._subs: dict[str, set[Subscription]] = {}
        self._retained: dict[str, dict[str, Any]] = {}

    def publish_clock(self, client_id: str, ts: int) -> None:
        """Retained publish; the retained value never moves backwards."""
        topic = clock_topic(client_id)
        frame = {"topic": topic, "ts": ts}
        with self._lock:
            kept = self._retained.get(topic)
            if kept is None or ts > kept["ts"]:
                self._retained[topic] = frame
            targets = list(self._subs.get(topic, ()))
        self._fanout(targets, frame)

    def publish_event(self, topic: str, event: dict[str, Any]) -> None:
        frame = {"topic": topic, "event": event}
        with self._lock:
            targets = list(self._subs.get(topic, ()))
        self._fanout(targets, frame)

    @staticmethod
    def _fanout(targets: list[Subscription], frame: dict[str, Any]) -> None:
        for sub in targets:
            try:
                sub._offer(frame)
            except Exception:  # a broken subscriber must not stop fan-out
                logger.exception("subscriber delivery failed")

    def subscribe(self, *topics: str) -> Subscription:
        sub = Subscription(self, ())
        for topic in topics:
            self.add_topic(sub, topic)
        return sub

    def add_topic(self, sub: Subscription, topic: str) -> None:
        """Attach one more topic; its retained frame is delivered first."""
        retained = None
        with self._lock:
            if topic not in sub.topics:
                sub.topics = (*sub.topics, topic)
            self._subs.setdefault(topic, set()).add(sub)
            retained = self._retained.get(topic)
        if retained is not None:
            sub._offer(retained)

    def _drop(self, sub: Subscription) -> None:
        with self._lock:
            for topic in sub.topics:
                self._subs.get(topic, set()).discard(sub)

    def retained_clock(self, client_id: str) -> int | None:
        with self._lock:
            frame = self._retained.get(clock_topic(client_id))
            return None if frame is None else frame["ts"]


class BusServer:
    """Line-JSON socket front end over an InProcessBus.

    Protocol: the client sends {"op": "subscribe", "topic": ...} lines;
    the server pushes bus frames as lines.  Nothing else.
    """

    def __init__(self, bus: InProcessBus, host: str = "127.0.0.1", port: int = 0):
        self.bus = bus
        self._sock = socket.create_server((host, port))
        self.port = self._sock.getsockname()[1]
        self.addr = f"{host}:{self.port}"
        self._closing = False
        self._conns: set[socket.socket] = set()
        self._lock = threading.Lock()
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="bus-accept", daemon=True
        )
        self._accept_thread.start()

    def _accept_loop(self) -> None:
        while not self._closing:
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            # Frames are tiny and latency matters; Nagle plus delayed
            # ACK holds consecutive pushes for ~40ms on loopback.
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._lock:
                self._conns.add(conn)
            threading.Thread(
                target=self._serve_conn, args=(conn,), daemon=True
            ).start()

    def _serve_conn(self, conn: socket.socket) -> None:
        sub = self.bus.subscribe()
        rfile = conn.makefile("rb")

        def pump() -> None:
            for frame in sub:
                try:
                    conn.sendall(wire.encode_line(frame))
                except OSError:
                    sub.close()
                    return

        threading.Thread(target=pump, daemon=True).start()
        try:
            while True:
                msg = wire.read_line_value(rfile)
                if not isinstance(msg, dict) or msg.get("op") != "subscribe":
                    logger.warning("bus conn sent unknown op: %r", msg)
                    continue
                topic = msg.get("topic")
                if isinstance(topic, str):
                    self.bus.add_topic(sub, topic)
        except (EOFError, OSError, wire.WireError):
            pass
        finally:
            sub.close()
            with self._lock:
                self._conns.discard(conn)
            try:
                conn.close()
            except OSError:
                pass

    def close(self) -> None:
        self._closing = True
        with self._lock:
            conns = list(self._conns)
        # shutdown() first: it wakes threads blocked in accept()/recv(),
        # which otherwise pin the socket open past close().
        for sock in (self._sock, *conns):
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                sock.close()
            except OSError:
                pass


class BusClient:
    """Blocking subscriber over the bus socket."""

    def __init__(self, addr: str, connect_timeout: float = 5.0) -> None:
        host, _, port = addr.rpartition(":")
        self._sock = socket.create_connection(
            (host or "127.0.0.1", int(port)), timeout=connect_timeout
        )
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock.settimeout(None)
        self._rfile = self._sock.makefile("rb")
        self._lock = threading.Lock()

    def subscribe(self, topic: str) -> None:
        with self._lock:
            self._sock.sendall(wire.encode_line({"op": "subscribe", "topic": topic}))

    def frames(self) -> Iterator[dict[str, Any]]:
        """Yield frames until the connection drops."""
        while True:
            try:
                frame = wire.read_line_value(self._rfile)
            except (EOFError, OSError, wire.WireError):
                return
            if isinstance(frame, dict):
                yield frame

    def close(self) -> None:
        # shutdown() unblocks a thread waiting in frames().
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._sock.close()
        except OSError:
            pass
