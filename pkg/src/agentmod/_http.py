"""Minimal JSON-over-HTTP plumbing shared by the reward and moderation services."""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable

logger = logging.getLogger(__name__)

Route = Callable[[Any], tuple[int, Any]]


class HttpError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


class JsonServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address: tuple[str, int], post_routes: dict[str, Route], max_in_flight: int = 16):
        self.post_routes = post_routes
        self.in_flight = threading.BoundedSemaphore(max_in_flight)
        super().__init__(address, _Handler)

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def start_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        return t


class _Handler(BaseHTTPRequestHandler):
    server: JsonServer
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        logger.debug("%s - " + fmt, self.address_string(), *args)

    def _send(self, status: int, body: Any) -> None:
        data = json.dumps(body, ensure_ascii=False).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self):
        if self.path == "/healthz":
            self._send(200, {"status": "ok"})
        else:
            self._send(404, {"error": "not found"})

    def do_POST(self):
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length)
        route = self.server.post_routes.get(self.path)
        if route is None:
            self._send(404, {"error": "not found"})
            return
        if not self.server.in_flight.acquire(blocking=False):
            self._send(429, {"error": "too many requests in flight"})
            return
        try:
            try:
                payload = json.loads(raw or b"null")
            except ValueError:
                raise HttpError(400, "body is not valid JSON") from None
            status, body = route(payload)
        except HttpError as exc:
            status, body = exc.status, {"error": str(exc)}
        except Exception as exc:  # keep the service up on handler bugs
            logger.exception("unhandled error on %s", self.path)
            status, body = 500, {"error": f"internal error: {exc}"}
        finally:
            self.server.in_flight.release()
        self._send(status, body)
