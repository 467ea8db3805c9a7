"""HTTP front of the collection server.

Three endpoints over an encrypted channel in deployment (TLS termination is
the fronting proxy's job; the process itself never reads or stores source
addresses): POST /v1/report ingests a JSON batch, GET /v1/model serves the
current forest document with version-conditional fetch, GET /v1/health
reports liveness.  Ingest errors answer 400 and never take the process down.
"""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .transport import BatchRejectedError, ServerStore, serve_model

logger = logging.getLogger(__name__)


class JsonHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "rtbmeter"

    def log_message(self, fmt, *args):  # route access logs through logging
        logger.debug("%s %s", self.address_string(), fmt % args)

    def read_body(self):
        length = int(self.headers.get("Content-Length", 0))
        return self.rfile.read(length) if length else b""

    def send_json(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def send_empty(self, status: int) -> None:
        self.send_response(status)
        self.send_header("Content-Length", "0")
        self.end_headers()

    def handle_one_request(self):
        try:
            super().handle_one_request()
        except (ConnectionError, BrokenPipeError):
            pass


class CollectionHandler(JsonHandler):
    store: ServerStore
    default_model: str

    def do_POST(self):
        if self.path != "/v1/report":
            self.send_json(404, {"error": "not found"})
            return
        try:
            batch = json.loads(self.read_body().decode("utf-8"))
            if not isinstance(batch, list):
                raise BatchRejectedError("batch must be a JSON array")
            self.store.ingest(batch)
        except (BatchRejectedError, ValueError, UnicodeDecodeError) as exc:
            self.send_json(400, {"error": str(exc)})
            return
        except Exception:
            logger.exception("ingest failed")
            self.send_json(500, {"error": "internal error"})
            return
        self.send_empty(204)

    def do_GET(self):
        try:
            if self.path == "/v1/health":
                version, _ = serve_model(self.store, self.default_model)
                self.send_json(
                    200,
                    {"status": "ok", "records": self.store.count(), "model_version": version},
                )
            elif self.path == "/v1/model":
                if_version = _etag_version(self.headers.get("If-None-Match"))
                version, document = serve_model(self.store, self.default_model, if_version)
                if document is None:
                    self.send_response(304)
                    self.send_header("ETag", f'"{version}"')
                    self.send_header("Content-Length", "0")
                    self.end_headers()
                    return
                body = document.encode("utf-8")
                self.send_response(200)
                self.send_header("Content-Type", "application/xml")
                self.send_header("ETag", f'"{version}"')
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)
            else:
                self.send_json(404, {"error": "not found"})
        except Exception:
            logger.exception("request failed")
            self.send_json(500, {"error": "internal error"})


def _etag_version(header: str | None) -> int | None:
    if not header:
        return None
    try:
        return int(header.strip().strip('"'))
    except ValueError:
        return None


class HttpService:
    """A ThreadingHTTPServer running on a background thread."""

    def __init__(self, handler_cls, host: str, port: int):
        self.httpd = ThreadingHTTPServer((host, port), handler_cls)
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def address(self) -> tuple[str, int]:
        return self.httpd.server_address[:2]

    def start(self) -> None:
        self._thread.start()

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        self._thread.join(timeout=5)


def make_collection_service(
    store: ServerStore, default_model: str, host: str = "127.0.0.1", port: int = 0
) -> HttpService:
    handler = type(
        "BoundCollectionHandler",
        (CollectionHandler,),
        {"store": store, "default_model": default_model},
    )
    return HttpService(handler, host, port)
