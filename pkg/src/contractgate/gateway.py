"""Operational wiring: HTTP listener, configuration, violation-log
persistence and the /healthz and /contracts endpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import queue
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional

from . import expr as E
from .contracts import derive_contracts, render_contracts
from .model import derive_routes, load_model, validate_model
from .monitor import HttpUpstream, Monitor, RequestContext, ViolationRecord

log = logging.getLogger(__name__)

ENV_PREFIX = "CONTRACTGATE_"


@dataclass
class GatewayConfig:
    listen_address: str = "127.0.0.1:8080"
    upstream_base_url: str = ""
    model_path: str = ""
    log_path: Optional[str] = None
    probe_timeout_ms: int = 2000
    upstream_timeout_ms: int = 10000
    paper_status: bool = False
    audit_get: bool = False
    expires_reading: str = "corrected"  # or "paper"

    def __post_init__(self):
        self.apply_env_overrides()
        if self.probe_timeout_ms <= 0 or self.upstream_timeout_ms <= 0:
            raise ValueError("timeouts must be positive")
        if self.expires_reading not in ("paper", "corrected"):
            raise ValueError("expires_reading must be 'paper' or 'corrected'")

    def apply_env_overrides(self) -> None:
        mapping = {
            "LISTEN": "listen_address",
            "UPSTREAM": "upstream_base_url",
            "MODEL": "model_path",
            "LOG": "log_path",
            "PROBE_TIMEOUT_MS": "probe_timeout_ms",
            "UPSTREAM_TIMEOUT_MS": "upstream_timeout_ms",
            "PAPER_STATUS": "paper_status",
            "AUDIT_GET": "audit_get",
            "EXPIRES_READING": "expires_reading",
        }
        for suffix, attr in mapping.items():
            raw = os.environ.get(ENV_PREFIX + suffix)
            if raw is None:
                continue
            current = getattr(self, attr)
            if isinstance(current, bool):
                setattr(self, attr, raw.lower() in ("1", "true", "yes", "on"))
            elif isinstance(current, int):
                setattr(self, attr, int(raw))
            else:
                setattr(self, attr, raw)


def flip_clock_comparisons(e: E.Expression) -> E.Expression:
    """Swap the operands of ordering comparisons that involve the clock,
    selecting the alternative reading of token-freshness invariants."""
    if isinstance(e, E.And):
        return E.And(flip_clock_comparisons(e.left), flip_clock_comparisons(e.right))
    if isinstance(e, E.Or):
        return E.Or(flip_clock_comparisons(e.left), flip_clock_comparisons(e.right))
    if isinstance(e, E.Implies):
        return E.Implies(flip_clock_comparisons(e.left), flip_clock_comparisons(e.right))
    if isinstance(e, E.Not):
        return E.Not(flip_clock_comparisons(e.operand))
    if isinstance(e, E.Compare) and e.op in ("<", "<=", ">", ">="):
        sides = (e.left, e.right)
        if any(isinstance(s, E.ClockTime) for s in sides) and not all(
            isinstance(s, E.ClockTime) for s in sides
        ):
            return E.Compare(e.op, e.right, e.left)
    return e


class ViolationLog:
    """Append-only JSONL sink fed through a bounded queue by a single writer
    thread; overload drops the oldest entries and counts the drops instead of
    blocking request handling."""

    def __init__(self, path: Optional[str], max_queue: int = 1024):
        self.path = path
        self.queue: queue.Queue = queue.Queue(maxsize=max_queue)
        self.dropped = 0
        self.written = 0
        self._lock = threading.Lock()
        self._closing = threading.Event()
        self._thread = threading.Thread(target=self._writer, daemon=True)
        self._thread.start()

    def record(self, violation: ViolationRecord) -> None:
        line = json.dumps(violation.to_json(), sort_keys=True)
        while True:
            try:
                self.queue.put_nowait(line)
                return
            except queue.Full:
                try:
                    self.queue.get_nowait()
                    with self._lock:
                        self.dropped += 1
                except queue.Empty:
                    pass

    def _writer(self) -> None:
        while not self._closing.is_set() or not self.queue.empty():
            try:
                line = self.queue.get(timeout=0.1)
            except queue.Empty:
                continue
            try:
                if self.path:
                    with open(self.path, "a", encoding="utf-8") as fh:
                        fh.write(line + "\n")
                with self._lock:
                    self.written += 1
            except OSError as exc:
                log.warning("violation log write failed: %s", exc)

    def close(self) -> None:
        self._closing.set()
        self._thread.join(timeout=5.0)


@dataclass
class Gateway:
    config: GatewayConfig
    monitor: Monitor
    contracts_text: str
    model_checksum: str
    violation_log: ViolationLog
    server: Optional[ThreadingHTTPServer] = None

    @property
    def port(self) -> int:
        return self.server.server_address[1] if self.server else 0


def build_gateway(cfg: GatewayConfig) -> Gateway:
    """Load and validate the model, derive routes and contracts, and wire the
    monitor; raises on an invalid model or unreadable paths."""
    document = Path(cfg.model_path).read_bytes()
    rm, bm, rules = load_model(document)
    diagnostics = validate_model(rm, bm, rules)
    if diagnostics:
        raise ValueError("invalid model: " + "; ".join(diagnostics))

    if cfg.expires_reading == "paper":
        bm = type(bm)(
            states=tuple(
                type(s)(s.name, flip_clock_comparisons(s.invariant)) for s in bm.states
            ),
            transitions=tuple(
                type(t)(
                    t.id,
                    t.source,
                    t.target,
                    t.http_method,
                    t.uri_template,
                    flip_clock_comparisons(t.guard) if t.guard else None,
                    flip_clock_comparisons(t.effect) if t.effect else None,
                    t.actor_role,
                )
                for t in bm.transitions
            ),
            initial=bm.initial,
        )

    routes = derive_routes(rm, bm)
    contracts = derive_contracts(bm, rules)
    monitor = Monitor(
        rm,
        routes,
        contracts,
        HttpUpstream(cfg.upstream_base_url, timeout_s=cfg.upstream_timeout_ms / 1000.0),
        probe_timeout_s=cfg.probe_timeout_ms / 1000.0,
        paper_status=cfg.paper_status,
        audit_get=cfg.audit_get,
        state_invariants=[(s.name, s.invariant) for s in bm.states],
    )
    return Gateway(
        config=cfg,
        monitor=monitor,
        contracts_text=render_contracts(contracts),
        model_checksum=hashlib.sha256(document).hexdigest(),
        violation_log=ViolationLog(cfg.log_path),
    )


class _GatewayHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    gateway: Gateway = None  # bound by make_server

    def _dispatch(self) -> None:
        gw = self.gateway
        length = int(self.headers.get("Content-Length") or 0)
        raw_body = self.rfile.read(length) if length else b""

        if self.path == "/healthz" and self.command == "GET":
            self._reply(
                200,
                [("Content-Type", "application/json")],
                json.dumps(
                    {
                        "status": "ok",
                        "model_sha256": gw.model_checksum,
                        "log_dropped": gw.violation_log.dropped,
                    }
                ).encode(),
            )
            return
        if self.path == "/contracts" and self.command == "GET":
            self._reply(
                200,
                [("Content-Type", "text/plain; charset=utf-8")],
                gw.contracts_text.encode("utf-8"),
            )
            return

        ctx = RequestContext.build(
            self.command, self.path, dict(self.headers.items()), raw_body
        )
        result = gw.monitor.handle(ctx, raw_body)
        if result.violation is not None:
            gw.violation_log.record(result.violation)
        self._reply(result.status, result.headers, result.body)

    def _reply(self, status: int, headers: list[tuple[str, str]], body: bytes) -> None:
        self.send_response_only(status)
        has_length = False
        for name, value in headers:
            if name.lower() == "content-length":
                has_length = True
            self.send_header(name, value)
        if not has_length:
            self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        if body and self.command != "HEAD":
            self.wfile.write(body)

    do_GET = do_POST = do_PUT = do_DELETE = do_PATCH = do_HEAD = _dispatch

    def log_message(self, fmt, *args):
        pass


def make_server(gateway: Gateway) -> ThreadingHTTPServer:
    host, _, port = gateway.config.listen_address.partition(":")
    handler = type("BoundGatewayHandler", (_GatewayHandler,), {"gateway": gateway})
    server = ThreadingHTTPServer((host or "127.0.0.1", int(port or 0)), handler)
    gateway.server = server
    return server


def start(cfg: GatewayConfig) -> Gateway:
    """Build and start serving in a background thread (used by tests and by
    the CLI, which then blocks on the server thread)."""
    gateway = build_gateway(cfg)
    server = make_server(gateway)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return gateway
