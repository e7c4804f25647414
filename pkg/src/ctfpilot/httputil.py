"""Minimal JSON-over-HTTP plumbing on the stdlib server. Enough for the
control-plane API and the bundled mock scoreboard; no framework needed."""

from __future__ import annotations

import json
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable


class JsonHandler(BaseHTTPRequestHandler):
    """Dispatches (method, path) against a routes table of
    (method, compiled-regex, fn) triples stored on the server object."""

    protocol_version = "HTTP/1.1"
    server_version = "ctfpilot"
    wbufsize = -1  # buffer whole responses: one segment, no Nagle stalls
    disable_nagle_algorithm = True

    def log_message(self, fmt, *args):  # stay quiet; never log headers/tokens
        pass

    def _dispatch(self, method: str) -> None:
        self._body_consumed = False
        path = self.path.split("?", 1)[0]
        server = self.server
        for route_method, pattern, fn in server.routes:  # type: ignore[attr-defined]
            if route_method != method:
                continue
            m = pattern.match(path)
            if m:
                try:
                    fn(self, **m.groupdict())
                except Exception as exc:  # noqa: BLE001 - surface as 500, keep serving
                    try:
                        self.send_json(500, {"ok": False, "error": {
                            "code": "internal_error", "message": str(exc)}})
                    except Exception:
                        pass
                return
        self.send_json(404, {"ok": False, "error": {"code": "not_found",
                                                    "message": f"no route for {path}"}})

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")

    def do_PATCH(self):
        self._dispatch("PATCH")

    def do_DELETE(self):
        self._dispatch("DELETE")

    def do_OPTIONS(self):
        self.send_response(204)
        for k, v in getattr(self.server, "extra_headers", lambda: [])():
            self.send_header(k, v)
        self.send_header("Content-Length", "0")
        self.end_headers()

    # helpers -----------------------------------------------------------

    def read_json(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        self._body_consumed = True
        if length == 0:
            return {}
        raw = self.rfile.read(length)
        try:
            data = json.loads(raw)
        except json.JSONDecodeError:
            return {}
        return data if isinstance(data, dict) else {}

    def _drain_body(self) -> None:
        # an unread body would desync the next keep-alive request
        if getattr(self, "_body_consumed", True):
            return
        self._body_consumed = True
        length = int(self.headers.get("Content-Length") or 0)
        if length:
            self.rfile.read(length)

    def bearer_token(self) -> str | None:
        auth = self.headers.get("Authorization", "")
        if auth.startswith("Bearer "):
            return auth[len("Bearer "):].strip()
        return None

    def send_json(self, status: int, payload) -> None:
        self._drain_body()
        body = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        for k, v in getattr(self.server, "extra_headers", lambda: [])():
            self.send_header(k, v)
        self.end_headers()
        self.wfile.write(body)

    def send_text(self, status: int, text: str, content_type: str = "text/plain") -> None:
        self._drain_body()
        body = text.encode()
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        for k, v in getattr(self.server, "extra_headers", lambda: [])():
            self.send_header(k, v)
        self.end_headers()
        self.wfile.write(body)


Route = tuple[str, "re.Pattern[str]", Callable]


def make_routes(table: list[tuple[str, str, Callable]]) -> list[Route]:
    """Compile ('GET', '/api/v1/challenges/(?P<cid>...)', fn) style entries."""
    return [(method, re.compile(f"^{pattern}$"), fn) for method, pattern, fn in table]


class HttpService:
    """A ThreadingHTTPServer bound to a handler routes table, run in a
    daemon thread. Port 0 picks an ephemeral port."""

    def __init__(self, host: str, port: int, routes: list[Route],
                 extra_headers: Callable[[], list[tuple[str, str]]] | None = None):
        self._server = ThreadingHTTPServer((host, port), JsonHandler)
        self._server.daemon_threads = True
        self._server.routes = routes  # type: ignore[attr-defined]
        self._server.extra_headers = extra_headers or (lambda: [])  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None

    @property
    def host(self) -> str:
        return self._server.server_address[0]

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def start(self) -> "HttpService":
        self._thread = threading.Thread(
            target=lambda: self._server.serve_forever(poll_interval=0.05),
            name=f"http-{self.port}", daemon=True,
        )
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread:
            self._thread.join(timeout=5)
