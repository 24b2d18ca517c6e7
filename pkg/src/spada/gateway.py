"""Browser-facing HTTP facade over the user API.

Routes:

    POST /v1/commit               body = user_commit params
    POST /v1/tasks/<id>/cancel
    GET  /v1/query?filter=<urlencoded JSON>
    GET  /v1/stream?topic=T[&topic=T2...]   server-sent events

Auth is the user token as ``Authorization: Bearer <token>``.  Errors
come back as JSON ``{"err": {"code", "msg"}}`` with the code mapped to
an HTTP status.  The stream endpoint forwards bus frames verbatim as
SSE ``data:`` lines; no history is replayed (fetch it via query).

Agents never use this surface; it exists for dashboards and scripts
that cannot speak the framed RPC protocol.
"""

from __future__ import annotations

import json
import logging
import threading
import urllib.parse
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any

from .rpc import (
    ERR_FAILED_PRECONDITION,
    ERR_INVALID_ARGUMENT,
    ERR_NOT_FOUND,
    ERR_UNAUTHENTICATED,
    ERR_UNAVAILABLE,
    RpcError,
)
from .server import ROLE_USER, ServerNode

logger = logging.getLogger(__name__)

HTTP_STATUS = {
    ERR_UNAUTHENTICATED: 401,
    ERR_NOT_FOUND: 404,
    ERR_INVALID_ARGUMENT: 400,
    ERR_FAILED_PRECONDITION: 409,
    ERR_UNAVAILABLE: 503,
}

MAX_BODY_BYTES = 16 * 1024 * 1024
SSE_KEEPALIVE_S = 15.0


class _Handler(BaseHTTPRequestHandler):
    server_version = "spada-gateway"
    protocol_version = "HTTP/1.1"

    # Set by GatewayServer on the server object.
    node: ServerNode

    def log_message(self, fmt: str, *args) -> None:
        logger.debug("%s " + fmt, self.address_string(), *args)

    # -- plumbing -----------------------------------------------------------

    def _cors(self) -> None:
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Headers", "Authorization, Content-Type")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")

    def _reply(self, status: int, payload: dict[str, Any]) -> None:
        body = json.dumps(payload, sort_keys=True).encode()
        self.send_response(status)
        self._cors()
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _fail(self, code: str, msg: str) -> None:
        self._reply(HTTP_STATUS.get(code, 500), {"err": {"code": code, "msg": msg}})

    def _token(self) -> str:
        auth = self.headers.get("Authorization", "")
        scheme, _, value = auth.partition(" ")
        return value.strip() if scheme.lower() == "bearer" else ""

    def _require_user(self) -> str | None:
        token = self._token()
        if self.server.node.tokens.role_of(token) != ROLE_USER:  # type: ignore[attr-defined]
            self._fail(ERR_UNAUTHENTICATED, "missing or invalid bearer token")
            return None
        return token

    def _body_json(self) -> Any:
        length = int(self.headers.get("Content-Length") or 0)
        if length > MAX_BODY_BYTES:
            raise RpcError(ERR_INVALID_ARGUMENT, "request body too large")
        raw = self.rfile.read(length)
        try:
            return json.loads(raw or b"{}")
        except json.JSONDecodeError as exc:
            raise RpcError(ERR_INVALID_ARGUMENT, f"body is not JSON: {exc}") from exc

    def _call(self, method: str, params: dict[str, Any], token: str) -> None:
        try:
            out = self.server.node.handle(method, params, token)  # type: ignore[attr-defined]
        except RpcError as exc:
            self._fail(exc.code, exc.msg)
            return
        except Exception:
            logger.exception("gateway call %s crashed", method)
            self._fail(ERR_UNAVAILABLE, "internal error")
            return
        self._reply(200, {"ok": out})

    # -- methods ------------------------------------------------------------

    def do_OPTIONS(self) -> None:  # CORS preflight
        self.send_response(204)
        self._cors()
        self.send_header("Content-Length", "0")
        self.end_headers()

    def do_POST(self) -> None:
        token = self._require_user()
        if token is None:
            return
        path = urllib.parse.urlsplit(self.path).path
        try:
            if path == "/v1/commit":
                self._call("user_commit", self._body_json(), token)
            elif path.startswith("/v1/tasks/") and path.endswith("/cancel"):
                task_id = path[len("/v1/tasks/") : -len("/cancel")]
                self._call("user_cancel", {"task_id": task_id}, token)
            else:
                self._fail(ERR_NOT_FOUND, f"no route {path}")
        except RpcError as exc:
            self._fail(exc.code, exc.msg)

    def do_GET(self) -> None:
        token = self._require_user()
        if token is None:
            return
        url = urllib.parse.urlsplit(self.path)
        query = urllib.parse.parse_qs(url.query)
        if url.path == "/v1/query":
            raw = query.get("filter", ["{}"])[0]
            try:
                flt = json.loads(raw)
            except json.JSONDecodeError as exc:
                self._fail(ERR_INVALID_ARGUMENT, f"filter is not JSON: {exc}")
                return
            self._call("user_query", {"filter": flt}, token)
        elif url.path == "/v1/stream":
            self._stream(query.get("topic", []))
        else:
            self._fail(ERR_NOT_FOUND, f"no route {url.path}")

    def _stream(self, topics: list[str]) -> None:
        if not topics:
            self._fail(ERR_INVALID_ARGUMENT, "stream needs at least one topic")
            return
        self.send_response(200)
        self._cors()
        self.send_header("Content-Type", "text/event-stream")
        self.send_header("Cache-Control", "no-cache")
        self.end_headers()
        sub = self.server.node.bus.subscribe(*topics)  # type: ignore[attr-defined]
        try:
            while not self.server.closing:  # type: ignore[attr-defined]
                frame = sub.get(timeout=SSE_KEEPALIVE_S)
                if frame is None:
                    chunk = b": keepalive\n\n"
                else:
                    chunk = b"data: " + json.dumps(
                        frame, sort_keys=True
                    ).encode() + b"\n\n"
                self.wfile.write(chunk)
                self.wfile.flush()
        except OSError:
            pass  # client went away
        finally:
            sub.close()


class GatewayServer:
    def __init__(self, node: ServerNode, host: str = "127.0.0.1", port: int = 0):
        self._httpd = ThreadingHTTPServer((host, port), _Handler)
        self._httpd.node = node  # type: ignore[attr-defined]
        self._httpd.closing = False  # type: ignore[attr-defined]
        self._httpd.daemon_threads = True
        self.port = self._httpd.server_address[1]
        self.addr = f"{host}:{self.port}"
        self.url = f"http://{self.addr}"
        self._thread = threading.Thread(
            target=self._httpd.serve_forever, daemon=True, name="gateway"
        )
        self._thread.start()

    def close(self) -> None:
        self._httpd.closing = True  # type: ignore[attr-defined]
        self._httpd.shutdown()
        self._httpd.server_close()


__all__ = ["GatewayServer"]
