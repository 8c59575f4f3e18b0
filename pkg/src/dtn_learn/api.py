"""HTTP/JSON API served by rural and urban daemons (consumed by the web UI).

Endpoints are documented in docs/api.md. Reads are concurrent; writes funnel
through the node lock the daemon shares with the protocol loop. Non-/api GET
paths serve the built UI from a static directory when configured.
"""

from __future__ import annotations

import json
import logging
import mimetypes
import threading
import time
import urllib.parse
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .content import ContentError, EmptyTitle, EmptyTopic, NotFound
from .node import DtnNode

log = logging.getLogger(__name__)

MAX_BODY = 96 * 1024 * 1024


def _status_payload(node: DtnNode, now_ms: int) -> dict:
    store = node.store
    entries = store.entries()
    complete = sum(1 for e in entries if e.complete)
    last_seen = None
    if node.last_peer_seen is not None:
        peer, at_s = node.last_peer_seen
        last_seen = {"peer": peer, "ago_s": max(0.0, time.monotonic() - at_s)}
    payload = {
        "node_id": node.node_id,
        "role": node.role.name.lower(),
        "now_ms": now_ms,
        "peer_last_seen": last_seen,
        "store": {
            "used_bytes": store.used_bytes(),
            "quota_bytes": store.quota,
            "bundles_complete": complete,
            "bundles_partial": len(entries) - complete,
        },
    }
    if node.content is not None:
        open_requests = sum(
            1 for r in node.content.requests.values()
            if r.status.value in ("pending_pickup", "in_transit", "at_gateway")
        )
        payload["requests_open"] = open_requests
        payload["catalog_items"] = len(node.content.list_content())
    if node.gateway is not None:
        payload["fetch_jobs_pending"] = sum(
            1 for j in node.gateway.jobs.values() if j.state.value == "queued"
        )
    return payload


def make_handler(node: DtnNode, lock: threading.RLock, ui_dir: str | Path | None,
                 clock_ms) -> type[BaseHTTPRequestHandler]:
    ui_root = Path(ui_dir).resolve() if ui_dir else None

    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            log.debug("api: " + fmt, *args)

        # -- plumbing ------------------------------------------------------

        def _send_json(self, obj, status=200):
            raw = json.dumps(obj).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(raw)))
            self.end_headers()
            self.wfile.write(raw)

        def _send_error_json(self, status: int, code: str, message: str):
            self._send_json({"error": code, "message": message}, status=status)

        def _read_body(self) -> dict | None:
            length = int(self.headers.get("Content-Length") or 0)
            if length > MAX_BODY:
                self._send_error_json(413, "too_large", "request body too large")
                return None
            raw = self.rfile.read(length) if length else b""
            try:
                obj = json.loads(raw.decode("utf-8")) if raw else {}
            except (UnicodeDecodeError, json.JSONDecodeError):
                self._send_error_json(400, "bad_json", "request body is not valid JSON")
                return None
            if not isinstance(obj, dict):
                self._send_error_json(400, "bad_json", "request body must be an object")
                return None
            return obj

        # -- routes --------------------------------------------------------

        def do_GET(self):
            parsed = urllib.parse.urlparse(self.path)
            parts = [p for p in parsed.path.split("/") if p]
            try:
                if parts[:2] == ["api", "content"] and len(parts) == 2:
                    items = node.content.list_content() if node.content else []
                    self._send_json([
                        {"title": i.title, "version": i.version, "origin": i.origin.value,
                         "updated_at": i.updated_at}
                        for i in items
                    ])
                elif parts[:2] == ["api", "content"] and len(parts) == 3:
                    title = urllib.parse.unquote(parts[2])
                    qs = urllib.parse.parse_qs(parsed.query)
                    version = int(qs["version"][0]) if "version" in qs else None
                    item = node.content.get_content(title, version)
                    self._send_json({
                        "title": item.title, "version": item.version, "body": item.body,
                        "origin": item.origin.value, "updated_at": item.updated_at,
                    })
                elif parts == ["api", "requests"]:
                    reqs = node.content.requests if node.content else {}
                    self._send_json([
                        {"request_id": r.request_id, "topic": r.topic,
                         "requester": r.requester, "status": r.status.value,
                         "created_at": r.created_at, "resolved_at": r.resolved_at,
                         "failure_reason": r.failure_reason}
                        for r in sorted(reqs.values(),
                                        key=lambda r: (r.created_at, r.request_id))
                    ])
                elif parts == ["api", "fetch-jobs"]:
                    jobs = node.gateway.jobs if node.gateway else {}
                    self._send_json([
                        {"request_id": j.request_id, "topic": j.topic,
                         "requester": j.requester, "state": j.state.value,
                         "attempts": j.attempts, "error_reason": j.error_reason}
                        for j in sorted(jobs.values(),
                                        key=lambda j: (j.created_at, j.request_id))
                    ])
                elif parts == ["api", "node", "status"]:
                    self._send_json(_status_payload(node, clock_ms()))
                elif parts and parts[0] == "api":
                    self._send_error_json(404, "not_found", f"no route {parsed.path}")
                else:
                    self._serve_static(parsed.path)
            except NotFound as e:
                self._send_error_json(404, "not_found", str(e))
            except (ValueError, KeyError) as e:
                self._send_error_json(400, "bad_request", str(e))

        def do_POST(self):
            parsed = urllib.parse.urlparse(self.path)
            parts = [p for p in parsed.path.split("/") if p]
            if node.content is None:
                self._send_error_json(404, "no_content_service",
                                      "this node role has no content API")
                return
            body = self._read_body()
            if body is None:
                return
            try:
                if parts == ["api", "content"]:
                    with lock:
                        item = node.content.publish_content(
                            str(body.get("title", "")), str(body.get("body", "")),
                            now=clock_ms(),
                        )
                    self._send_json(
                        {"title": item.title, "version": item.version,
                         "origin": item.origin.value, "updated_at": item.updated_at},
                        status=201,
                    )
                elif parts == ["api", "requests"]:
                    with lock:
                        before = set(node.content.requests)
                        req = node.content.request_topic(str(body.get("topic", "")),
                                                         now=clock_ms())
                    created = req.request_id not in before
                    self._send_json(
                        {"request_id": req.request_id, "topic": req.topic,
                         "requester": req.requester, "status": req.status.value,
                         "created_at": req.created_at},
                        status=201 if created else 200,
                    )
                else:
                    self._send_error_json(404, "not_found", f"no route {parsed.path}")
            except EmptyTitle:
                self._send_error_json(400, "empty_title", "title must be nonempty")
            except EmptyTopic:
                self._send_error_json(400, "empty_topic", "topic must be nonempty")
            except ContentError as e:
                self._send_error_json(400, "content_error", str(e))

        def _serve_static(self, path: str):
            if ui_root is None:
                self._send_error_json(404, "not_found", "no UI bundle configured")
                return
            rel = urllib.parse.unquote(path).lstrip("/") or "index.html"
            target = (ui_root / rel).resolve()
            if not str(target).startswith(str(ui_root)) or not target.is_file():
                target = ui_root / "index.html"
                if not target.is_file():
                    self._send_error_json(404, "not_found", "file not found")
                    return
            raw = target.read_bytes()
            ctype = mimetypes.guess_type(str(target))[0] or "application/octet-stream"
            self.send_response(200)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(raw)))
            self.end_headers()
            self.wfile.write(raw)

    return Handler


class ApiServer:
    def __init__(self, node: DtnNode, lock: threading.RLock, bind: tuple[str, int],
                 ui_dir: str | Path | None = None, clock_ms=None):
        clock_ms = clock_ms or (lambda: int(time.time() * 1000))
        handler = make_handler(node, lock, ui_dir, clock_ms)
        self.httpd = ThreadingHTTPServer(bind, handler)
        self.thread = threading.Thread(target=self.httpd.serve_forever,
                                       name="api", daemon=True)

    @property
    def port(self) -> int:
        return self.httpd.server_address[1]

    def start(self) -> None:
        self.thread.start()

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
