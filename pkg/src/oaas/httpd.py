"""HTTP front: one listener mounting the gateway, developer APIs, and the
state-storage blob endpoint.

The blob routes double as the "state storage service": presigned URLs
point here, remote functions and redirect-following clients fetch from
here, and the relay path re-enters through here so relayed payloads
really cross the service boundary instead of short-circuiting in process.
"""

from __future__ import annotations

import json
import shutil
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlsplit

from .blobs import BlobPath, BlobStore, PresignedUrl
from .errors import AccessDenied, NotFound
from .gateway import Gateway, Response

MAX_BODY = 1024 * 1024 * 1024  # hard stop against unbounded uploads


class PlatformHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    # -- routing -------------------------------------------------------------

    def do_GET(self):
        parts = urlsplit(self.path)
        segments = [s for s in parts.path.split("/") if s]
        if parts.path == "/healthz":
            return self._send(Response.json(200, {"status": "ok"}))
        if segments[:1] == ["blob"]:
            return self._blob(segments, parts.query, "GET")
        if parts.path.startswith("/oal/"):
            raw_expr = self.path.split("/oal/", 1)[1]
            expr = raw_expr.split("?", 1)[0]
            query = parse_qs(parts.query)
            headers = {k: v for k, v in self.headers.items()}
            return self._send(
                self._safe(self.server.gateway.handle_oai, expr, headers, query.get("input"))
            )
        if segments[:2] == ["api", "deployments"] and len(segments) == 3:
            return self._send(self._safe(self.server.gateway.handle_deployment_status, segments[2]))
        if segments[:2] == ["api", "objects"] and len(segments) == 3:
            return self._send(self._safe(self.server.gateway.handle_object_status, segments[2]))
        self._send(Response.json(404, {"error": "NotFound", "detail": parts.path}))

    def do_POST(self):
        parts = urlsplit(self.path)
        segments = [s for s in parts.path.split("/") if s]
        if segments == ["api", "packages"]:
            return self._send(self._safe(self.server.gateway.handle_register_package, self._body().decode("utf-8")))
        if segments == ["api", "invocations"]:
            return self._send(self._safe(self.server.gateway.handle_async_invoke, self._json_body()))
        if segments[:2] == ["api", "classes"] and len(segments) == 4 and segments[3] == "objects":
            return self._send(self._safe(self.server.gateway.handle_create_object, segments[2], self._json_body()))
        if segments[:2] == ["api", "objects"] and len(segments) == 4 and segments[3] == "confirm":
            return self._send(self._safe(self.server.gateway.handle_confirm_upload, segments[2]))
        self._send(Response.json(404, {"error": "NotFound", "detail": parts.path}))

    def do_PUT(self):
        parts = urlsplit(self.path)
        segments = [s for s in parts.path.split("/") if s]
        if segments[:1] == ["blob"]:
            return self._blob(segments, parts.query, "PUT")
        self._send(Response.json(404, {"error": "NotFound", "detail": parts.path}))

    # -- blob endpoint ---------------------------------------------------------

    def _blob(self, segments: list, query: str, method: str):
        blobs = self.server.blobs
        if len(segments) != 4:
            return self._send(Response.json(404, {"error": "NotFound", "detail": "bad blob path"}))
        params = parse_qs(query)
        try:
            path = BlobPath(segments[1], segments[2], segments[3])
            signed = PresignedUrl(
                path=path,
                method=params["method"][0],
                expires_at=int(params["expires"][0]),
                signature=params["sig"][0],
            )
        except (KeyError, ValueError, IndexError):
            return self._send(Response.json(403, {"error": "AccessDenied", "detail": "malformed capability"}))
        try:
            if method == "GET":
                import os

                stream = blobs.get_blob(path, signed)
                size = os.fstat(stream.fileno()).st_size
                self.send_response(200)
                self.send_header("Content-Type", "application/octet-stream")
                self.send_header("Content-Length", str(size))
                self.end_headers()
                try:
                    shutil.copyfileobj(stream, self.wfile)
                finally:
                    stream.close()
                return
            written = blobs.put_blob(path, self._body_stream(), signed)
            return self._send(Response.json(200, {"bytes": written}))
        except AccessDenied as exc:
            return self._send(Response.json(403, {"error": "AccessDenied", "detail": str(exc)}))
        except NotFound as exc:
            return self._send(Response.json(404, {"error": "NotFound", "detail": str(exc)}))

    # -- plumbing ---------------------------------------------------------------

    def _body(self) -> bytes:
        length = int(self.headers.get("Content-Length", 0))
        if length > MAX_BODY:
            raise ValueError("request body too large")
        return self.rfile.read(length) if length else b""

    def _body_stream(self):
        import io

        length = int(self.headers.get("Content-Length", 0))
        if length > MAX_BODY:
            raise ValueError("request body too large")

        class _Limited(io.RawIOBase):
            def __init__(self, raw, remaining):
                self.raw = raw
                self.remaining = remaining

            def read(self, size=-1):
                if self.remaining <= 0:
                    return b""
                if size is None or size < 0 or size > self.remaining:
                    size = self.remaining
                chunk = self.raw.read(size)
                self.remaining -= len(chunk)
                return chunk

        return _Limited(self.rfile, length)

    def _json_body(self) -> dict:
        raw = self._body()
        if not raw:
            return {}
        try:
            parsed = json.loads(raw)
            return parsed if isinstance(parsed, dict) else {}
        except ValueError:
            return {}

    def _safe(self, fn, *args) -> Response:
        """Gateway calls buffer their whole response; any unexpected error
        can still be turned into a clean 500."""
        try:
            return fn(*args)
        except Exception as exc:
            return Response.json(500, {"error": "InternalError", "detail": str(exc)})

    def _send(self, response: Response):
        try:
            self.send_response(response.status)
            self.send_header("Content-Type", response.content_type)
            for key, value in response.headers.items():
                self.send_header(key, value)
            if response.instance is not None:
                self.send_header("X-OaaS-Instance", response.instance)
            if response.stream is not None:
                self.send_header("Content-Length", str(response.stream.size))
                self.end_headers()
                try:
                    shutil.copyfileobj(response.stream.stream, self.wfile)
                finally:
                    response.stream.stream.close()
                return
            self.send_header("Content-Length", str(len(response.body)))
            self.end_headers()
            if response.body:
                self.wfile.write(response.body)
        except (BrokenPipeError, ConnectionResetError):
            pass  # client went away mid-response

    def log_message(self, *args):
        pass  # request logging is the benchmark's job, not the server's


class PlatformServer:
    def __init__(self, host: str, port: int, gateway: Gateway, blobs: BlobStore):
        self.httpd = ThreadingHTTPServer((host, port), PlatformHandler)
        self.httpd.daemon_threads = True
        self.httpd.gateway = gateway  # type: ignore[attr-defined]
        self.httpd.blobs = blobs  # type: ignore[attr-defined]
        self._thread: "threading.Thread | None" = None

    @property
    def address(self) -> tuple[str, int]:
        host, port = self.httpd.server_address[:2]
        return str(host), int(port)

    def start(self) -> None:
        if self._thread is not None:
            return
        self._thread = threading.Thread(target=self.httpd.serve_forever, name="http", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None
