"""Read-only HTTP query service over one loaded snapshot (stdlib ``http.server``)."""

from __future__ import annotations

import json
import logging
import re
import signal
import threading
import time
from dataclasses import dataclass
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .diagnosis import DEFAULT_K, METRICS, CaseDatabase
from .evaluation import canonical_json
from .pipeline import QueryError, open_database, query_payload

log = logging.getLogger(__name__)

_RECORD_PATH = re.compile(r"^/v1/records/(\d+)$")


@dataclass(frozen=True)
class ServiceConfig:
    snapshot: str
    host: str = "127.0.0.1"
    port: int = 8080
    default_k: int = DEFAULT_K
    metric: str = "hamming"
    max_body_bytes: int = 8 << 20

    def __post_init__(self):
        if self.default_k < 1:
            raise ValueError("default k must be >= 1")
        if not 0 <= self.port <= 65535:
            raise ValueError(f"invalid port {self.port}")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        if self.max_body_bytes < 1:
            raise ValueError("max_body_bytes must be positive")


def handle_query(db: CaseDatabase, body: bytes, cfg: ServiceConfig) -> str:
    """Decode a POST /v1/query body and answer with the same JSON the CLI prints."""
    try:
        req = json.loads(body)
    except (ValueError, UnicodeDecodeError) as exc:
        raise QueryError("invalid_json", f"request body is not JSON: {exc}") from None
    if not isinstance(req, dict) or "embeddings" not in req:
        raise QueryError("bad_request", "expected an object with an 'embeddings' field")
    embeddings = req["embeddings"]
    if not isinstance(embeddings, list) or not all(isinstance(v, list) for v in embeddings):
        raise QueryError("bad_embeddings", "embeddings must be a list of vectors")
    if len({len(v) for v in embeddings}) > 1:
        raise QueryError("dimension_mismatch", "views differ in dimension")
    polyp_id = req.get("polyp_id")
    if polyp_id is not None and (isinstance(polyp_id, bool) or not isinstance(polyp_id, int) or polyp_id < 0):
        raise QueryError("bad_request", "polyp_id must be a non-negative integer")
    try:
        payload = query_payload(
            db,
            embeddings,
            k=req.get("k", cfg.default_k),
            metric=req.get("metric", cfg.metric),
            polyp_id=polyp_id,
            exclude_self=bool(req.get("exclude_self", False)),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, QueryError):
            raise
        raise QueryError("bad_embeddings", str(exc)) from None
    return canonical_json(payload)


class _Handler(BaseHTTPRequestHandler):
    server_version = "lesion-retrieval/1"
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.info("%s %s", self.address_string(), fmt % args)

    def _send(self, status: int, body: str, started: float):
        data = body.encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(data)))
        self.send_header("X-Latency-Ms", f"{(time.perf_counter() - started) * 1e3:.3f}")
        self.end_headers()
        self.wfile.write(data)

    def _error(self, status: int, code: str, message: str, started: float):
        self._send(status, canonical_json({"error": {"code": code, "message": message}}), started)

    def do_GET(self):
        started = time.perf_counter()
        db: CaseDatabase = self.server.db
        path = self.path.split("?", 1)[0]
        if path == "/v1/health":
            body = {"k_bits": db.store.hash_bits, "records": len(db.store), "status": "ok"}
            return self._send(HTTPStatus.OK, canonical_json(body), started)
        m = _RECORD_PATH.match(path)
        if m:
            rec = db.store.by_id.get(int(m.group(1)))
            if rec is None:
                return self._error(HTTPStatus.NOT_FOUND, "unknown_record", f"no record {m.group(1)}", started)
            body = {"label": rec.label, "polyp_id": rec.polyp_id, "record_id": rec.record_id}
            if "include_code=1" in self.path.partition("?")[2].split("&"):
                body["code"] = rec.code.words.astype("<u8").tobytes().hex()
            return self._send(HTTPStatus.OK, canonical_json(body), started)
        self._error(HTTPStatus.NOT_FOUND, "not_found", f"no route for GET {path}", started)

    def do_POST(self):
        started = time.perf_counter()
        cfg: ServiceConfig = self.server.cfg
        if self.path != "/v1/query":
            return self._error(HTTPStatus.NOT_FOUND, "not_found", f"no route for POST {self.path}", started)
        try:
            length = int(self.headers.get("Content-Length", ""))
        except ValueError:
            return self._error(HTTPStatus.LENGTH_REQUIRED, "length_required", "Content-Length required", started)
        if length > cfg.max_body_bytes:
            self.close_connection = True
            return self._error(
                HTTPStatus.REQUEST_ENTITY_TOO_LARGE, "body_too_large", f"limit is {cfg.max_body_bytes} bytes", started
            )
        body = self.rfile.read(length)
        try:
            out = handle_query(self.server.db, body, cfg)
        except QueryError as exc:
            return self._error(HTTPStatus.BAD_REQUEST, exc.code, str(exc), started)
        self._send(HTTPStatus.OK, out, started)


class QueryServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, cfg: ServiceConfig, db: CaseDatabase | None = None):
        self.cfg = cfg
        self.db = open_database(cfg.snapshot) if db is None else db
        super().__init__((cfg.host, cfg.port), _Handler)


def serve(cfg: ServiceConfig, ready=None) -> int:
    """Run until SIGINT/SIGTERM.  Loading or binding failures propagate to the caller."""
    server = QueryServer(cfg)
    host, port = server.server_address[:2]
    log.info("serving %d records (K=%d) on http://%s:%d", len(server.db.store), server.db.store.hash_bits, host, port)
    if ready is not None:
        ready(host, port)

    def stop(signum, frame):
        # shutdown() blocks until serve_forever returns, so it cannot run on this thread
        threading.Thread(target=server.shutdown, daemon=True).start()

    previous = {s: signal.signal(s, stop) for s in (signal.SIGINT, signal.SIGTERM)}
    try:
        server.serve_forever()
    finally:
        server.server_close()
        for s, h in previous.items():
            signal.signal(s, h)
    return 0
