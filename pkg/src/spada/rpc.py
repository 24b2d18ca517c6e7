"""Framed RPC over TCP: the transport both agents and user tooling use.

Requests and responses are single canonical-JSON frames with a 4-byte
big-endian length prefix.  A request carries {id, method, params,
token}; the response carries the same id and either "ok" or "err".
Error codes are a closed set; anything transport-level surfaces as
RpcTransportError instead.
"""

from __future__ import annotations

import logging
import random
import socket
import threading
import time
from typing import Any, Callable, Protocol

from . import wire
from .config import parse_addr

logger = logging.getLogger(__name__)

ERR_UNAUTHENTICATED = "unauthenticated"
ERR_NOT_FOUND = "not-found"
ERR_INVALID_ARGUMENT = "invalid-argument"
ERR_FAILED_PRECONDITION = "failed-precondition"
ERR_UNAVAILABLE = "unavailable"

ERROR_CODES = frozenset(
    {
        ERR_UNAUTHENTICATED,
        ERR_NOT_FOUND,
        ERR_INVALID_ARGUMENT,
        ERR_FAILED_PRECONDITION,
        ERR_UNAVAILABLE,
    }
)


class RpcError(Exception):
    """An in-protocol error response."""

    def __init__(self, code: str, msg: str = "") -> None:
        assert code in ERROR_CODES, code
        super().__init__(f"{code}: {msg}" if msg else code)
        self.code = code
        self.msg = msg


class RpcTransportError(Exception):
    """The call never produced a response (socket trouble)."""


class Handler(Protocol):
    def handle(self, method: str, params: dict[str, Any], token: str) -> dict[str, Any]:
        """Return the ok body or raise RpcError."""


class RpcServer:
    """Accepts connections and dispatches frames to a handler.

    One thread per connection; requests on a single connection are
    served in order, which the protocol relies on nowhere but keeps
    reasoning simple.
    """

    def __init__(self, handler: Handler, host: str = "127.0.0.1", port: int = 0):
        self.handler = handler
        self._sock = socket.create_server((host, port))
        self.port = self._sock.getsockname()[1]
        self.addr = f"{host}:{self.port}"
        self._closing = False
        self._conns: set[socket.socket] = set()
        self._lock = threading.Lock()
        threading.Thread(target=self._accept_loop, name="rpc-accept", daemon=True).start()

    def _accept_loop(self) -> None:
        while not self._closing:
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            # Small request/response frames; never let Nagle queue them.
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._lock:
                self._conns.add(conn)
            threading.Thread(target=self._serve_conn, args=(conn,), daemon=True).start()

    def _serve_conn(self, conn: socket.socket) -> None:
        rfile = conn.makefile("rb")
        wfile = conn.makefile("wb")
        try:
            while True:
                try:
                    request = wire.read_frame(rfile)
                except (EOFError, wire.WireError, OSError):
                    return
                response = self._dispatch(request)
                try:
                    wire.write_frame(wfile, response)
                except OSError:
                    return
        finally:
            with self._lock:
                self._conns.discard(conn)
            for closer in (rfile.close, wfile.close, conn.close):
                try:
                    closer()
                except OSError:
                    pass

    def _dispatch(self, request: Any) -> dict[str, Any]:
        req_id = request.get("id") if isinstance(request, dict) else None
        if (
            not isinstance(request, dict)
            or not isinstance(request.get("method"), str)
            or not isinstance(request.get("params"), dict)
        ):
            return _err(req_id, ERR_INVALID_ARGUMENT, "malformed request envelope")
        token = request.get("token")
        if not isinstance(token, str):
            return _err(req_id, ERR_UNAUTHENTICATED, "missing token")
        try:
            ok = self.handler.handle(request["method"], request["params"], token)
            return {"id": req_id, "ok": ok}
        except RpcError as exc:
            return _err(req_id, exc.code, exc.msg)
        except Exception:
            logger.exception("handler crashed on %s", request.get("method"))
            return _err(req_id, ERR_UNAVAILABLE, "internal error")

    def close(self) -> None:
        self._closing = True
        # shutdown() wakes threads blocked in accept()/recv() so they
        # release the socket; close() alone leaves the fd pinned by the
        # blocked syscall and the port stays bound.
        for sock in (self._sock, *self._snapshot_conns()):
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                sock.close()
            except OSError:
                pass

    def _snapshot_conns(self) -> list[socket.socket]:
        with self._lock:
            return list(self._conns)


def _err(req_id: Any, code: str, msg: str) -> dict[str, Any]:
    return {"id": req_id, "err": {"code": code, "msg": msg}}


class RpcClient:
    """Blocking client over one persistent connection.

    Calls are serialized with a lock; a broken connection is re-dialed
    once per call before giving up with RpcTransportError.
    """

    def __init__(self, addr: str, token: str, *, connect_timeout: float = 5.0):
        self.addr = addr
        self.token = token
        self.connect_timeout = connect_timeout
        self._lock = threading.Lock()
        self._sock: socket.socket | None = None
        self._rfile = None
        self._wfile = None
        self._next_id = 0

    def _connect(self) -> None:
        host, port = parse_addr(self.addr)
        sock = socket.create_connection((host, port), timeout=self.connect_timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(None)
        self._sock = sock
        self._rfile = sock.makefile("rb")
        self._wfile = sock.makefile("wb")

    def _drop_conn(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
        self._sock = None

    def call(self, method: str, params: dict[str, Any]) -> dict[str, Any]:
        with self._lock:
            for attempt in (0, 1):
                try:
                    if self._sock is None:
                        self._connect()
                    self._next_id += 1
                    req_id = self._next_id
                    wire.write_frame(
                        self._wfile,
                        {
                            "id": req_id,
                            "method": method,
                            "params": params,
                            "token": self.token,
                        },
                    )
                    response = wire.read_frame(self._rfile)
                    break
                except (OSError, EOFError, wire.WireError) as exc:
                    self._drop_conn()
                    if attempt:
                        raise RpcTransportError(str(exc)) from exc
            if not isinstance(response, dict) or response.get("id") != req_id:
                self._drop_conn()
                raise RpcTransportError("response id mismatch")
            if "err" in response:
                err = response["err"]
                code = err.get("code", ERR_UNAVAILABLE)
                if code not in ERROR_CODES:
                    code = ERR_UNAVAILABLE
                raise RpcError(code, err.get("msg", ""))
            ok = response.get("ok")
            if not isinstance(ok, dict):
                raise RpcTransportError("response lacks ok body")
            return ok

    def close(self) -> None:
        with self._lock:
            self._drop_conn()


class RetryingRpcClient:
    """RpcClient plus jittered exponential backoff on unavailability.

    Transport failures and "unavailable" responses are retried until
    ``give_up`` (a threading.Event) is set; other RpcErrors pass
    through immediately, because retrying a not-found will not make it
    exist.
    """

    def __init__(
        self,
        addr: str,
        token: str,
        *,
        base_s: float = 1.0,
        cap_s: float = 60.0,
        rng: random.Random | None = None,
        sleep: Callable[[float], None] | None = None,
    ):
        self._client = RpcClient(addr, token)
        self.base_s = base_s
        self.cap_s = cap_s
        self._rng = rng or random.Random()
        self._sleep = sleep or time.sleep
        self.give_up = threading.Event()

    def call(self, method: str, params: dict[str, Any]) -> dict[str, Any]:
        delay = self.base_s
        while True:
            try:
                return self._client.call(method, params)
            except (RpcTransportError, RpcError) as exc:
                if isinstance(exc, RpcError) and exc.code != ERR_UNAVAILABLE:
                    raise
                if self.give_up.is_set():
                    raise RpcTransportError("shutting down") from exc
                # Full jitter: sleep somewhere in (0, delay].
                pause = self._rng.uniform(delay * 0.1, delay)
                logger.debug("call %s failed (%s); retrying in %.2fs", method, exc, pause)
                if self.give_up.wait(pause):
                    raise RpcTransportError("shutting down") from exc
                delay = min(delay * 2, self.cap_s)

    def close(self) -> None:
        self.give_up.set()
        self._client.close()
