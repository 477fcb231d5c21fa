"""Per-request enforcement: resolve the pre-state environment by probing the
upstream with GETs, check the precondition, snapshot the values it used,
forward, resolve the post-state environment from the response (and re-probes),
check the postcondition and produce a verdict.

Undefined values never escape as exceptions; they fold into UNKNOWN and the
monitor treats UNKNOWN as a violation (fail-closed).
"""

from __future__ import annotations

import http.client
import json
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Optional
from urllib.parse import urlsplit

from . import expr as E
from .contracts import Contract
from .model import Binding, ResourceModel, RouteTable

HOP_BY_HOP = {
    "connection",
    "keep-alive",
    "proxy-authenticate",
    "proxy-authorization",
    "te",
    "trailer",
    "transfer-encoding",
    "upgrade",
}


# ---------------------------------------------------------------------------
# Transport


class UpstreamError(ConnectionError):
    pass


@dataclass
class UpstreamResponse:
    status: int
    headers: list[tuple[str, str]]
    body: bytes

    def header(self, name: str) -> Optional[str]:
        lowered = name.lower()
        for k, v in self.headers:
            if k.lower() == lowered:
                return v
        return None

    def json(self) -> Optional[object]:
        if not self.body:
            return None
        try:
            return json.loads(self.body.decode("utf-8"))
        except (ValueError, UnicodeDecodeError):
            return None


class HttpUpstream:
    """Thin upstream client over http.client; preserves response header order
    and case so passing traffic can be relayed verbatim."""

    def __init__(self, base_url: str, timeout_s: float = 10.0):
        parts = urlsplit(base_url)
        if parts.scheme not in ("http", ""):
            raise ValueError(f"unsupported upstream scheme {parts.scheme!r}")
        self.host = parts.hostname or "127.0.0.1"
        self.port = parts.port or 80
        self.timeout_s = timeout_s

    def request(
        self,
        method: str,
        path: str,
        headers: Optional[list[tuple[str, str]]] = None,
        body: bytes = b"",
        timeout_s: Optional[float] = None,
    ) -> UpstreamResponse:
        conn = http.client.HTTPConnection(
            self.host, self.port, timeout=timeout_s or self.timeout_s
        )
        header_map: dict[str, str] = {}
        for k, v in headers or []:
            if k.lower() in HOP_BY_HOP or k.lower() == "host":
                continue
            header_map[k] = v
        if body:
            header_map.setdefault("Content-Length", str(len(body)))
        try:
            conn.request(method, path, body=body or None, headers=header_map)
            resp = conn.getresponse()
            payload = resp.read()
            return UpstreamResponse(resp.status, list(resp.getheaders()), payload)
        except OSError as exc:
            raise UpstreamError(str(exc)) from exc
        finally:
            conn.close()


# ---------------------------------------------------------------------------
# Request context and verdicts


@dataclass
class RequestContext:
    method: str
    uri: str
    path_params: dict[str, str] = field(default_factory=dict)
    headers: dict[str, str] = field(default_factory=dict)  # lowercase names
    body: object = None  # parsed request document; None when unparseable
    arrival_time: datetime = field(
        default_factory=lambda: datetime.now(timezone.utc)
    )

    @classmethod
    def build(
        cls,
        method: str,
        uri: str,
        headers: dict[str, str],
        raw_body: bytes,
        arrival_time: Optional[datetime] = None,
    ) -> "RequestContext":
        body: object = None
        if raw_body:
            try:
                body = json.loads(raw_body.decode("utf-8"))
            except (ValueError, UnicodeDecodeError):
                body = None  # all request.* paths become Absent (fail-closed)
        return cls(
            method=method,
            uri=uri,
            headers={k.lower(): v for k, v in headers.items()},
            body=body,
            arrival_time=arrival_time or datetime.now(timezone.utc),
        )

    def auth_token(self) -> Optional[str]:
        token = self.headers.get("x-auth-token")
        if token:
            return token
        node = json_walk(self.body, ("auth", "identity", "token", "id"))
        return node if isinstance(node, str) else None


@dataclass
class Snapshot:
    bindings: dict[E.Path, E.Value]
    captured_at: datetime


@dataclass
class Verdict:
    outcome: str  # pass | pre_violation | post_violation | unmodeled_method
    failed_atoms: list[tuple[str, E.TriBool]] = field(default_factory=list)
    contract_id: Optional[str] = None
    probe_ms: float = 0.0
    upstream_ms: float = 0.0
    total_ms: float = 0.0

    @property
    def passed(self) -> bool:
        return self.outcome == "pass"


@dataclass
class ViolationRecord:
    timestamp: datetime
    verdict: Verdict
    method: str
    uri: str
    requester: Optional[str] = None
    upstream_status: Optional[int] = None

    def to_json(self) -> dict:
        return {
            "ts": self.timestamp.isoformat(),
            "phase": {
                "pre_violation": "pre",
                "post_violation": "post",
                "unmodeled_method": "routing",
            }.get(self.verdict.outcome, self.verdict.outcome),
            "method": self.method,
            "uri": self.uri,
            "contract": self.verdict.contract_id,
            "failed": [
                {"expr": text, "value": value.value}
                for text, value in self.verdict.failed_atoms
            ],
            "requester": self.requester,
            "upstream_status": self.upstream_status,
            "latency_ms": round(self.verdict.total_ms, 3),
        }


# ---------------------------------------------------------------------------
# Monitor variables (self.*)


class MonitorVariables:
    """Shared store for per-resource ``self.processing`` flags; acquire is an
    atomic test-and-set so concurrent side-effect calls on one resource
    serialize their pre-checks."""

    def __init__(self):
        self._lock = threading.Lock()
        self._processing: set[str] = set()

    def processing(self, uri: str) -> bool:
        with self._lock:
            return uri in self._processing

    def acquire(self, uri: str) -> bool:
        with self._lock:
            if uri in self._processing:
                return False
            self._processing.add(uri)
            return True

    def release(self, uri: str) -> None:
        with self._lock:
            self._processing.discard(uri)


# ---------------------------------------------------------------------------
# JSON helpers


def json_walk(node: object, segments: tuple[str, ...]) -> object:
    """Exact descent through dicts/lists; integer segments index lists.
    Returns None when the path does not exist."""
    for seg in segments:
        if isinstance(node, dict):
            if seg not in node:
                return None
            node = node[seg]
        elif isinstance(node, list):
            try:
                node = node[int(seg)]
            except (ValueError, IndexError):
                return None
        else:
            return None
    return node


def json_search(node: object, segments: tuple[str, ...]) -> object:
    """Like json_walk but the first segment may live at any depth: payloads
    wrap fields in envelope objects (e.g. ``auth`` or ``token``), so
    ``scope`` finds ``auth.scope``.  Document order, first match wins."""
    direct = json_walk(node, segments)
    if direct is not None:
        return direct
    if isinstance(node, dict):
        for key, child in node.items():
            if key == segments[0]:
                rest = json_walk(child, segments[1:])
                if rest is not None:
                    return rest
            found = json_search(child, segments)
            if found is not None:
                return found
    elif isinstance(node, list):
        for child in node:
            found = json_search(child, segments)
            if found is not None:
                return found
    return None


def json_to_value(node: object, attr_type: Optional[str] = None) -> E.Value:
    if node is None:
        return E.ABSENT
    if attr_type == "timestamp" and isinstance(node, str):
        parsed = E.parse_timestamp(node)
        return E.timestamp(parsed) if parsed else E.INVALID
    if isinstance(node, bool):
        return E.boolean(node)
    if isinstance(node, int):
        return E.integer(node)
    if isinstance(node, str):
        if attr_type == "string" or attr_type is None:
            return E.text(node)
        return E.text(node)
    if isinstance(node, float):
        return E.text(str(node))
    return E.document(node)


# ---------------------------------------------------------------------------
# Environment resolution


class _ProbeCache:
    """One prober per request; GET-only, results cached per URI."""

    def __init__(self, upstream: HttpUpstream, timeout_s: float):
        self.upstream = upstream
        self.timeout_s = timeout_s
        self.cache: dict[tuple[str, Optional[str]], UpstreamResponse] = {}
        self.elapsed_ms = 0.0
        self.failed = False

    def get(self, path: str, auth_token: Optional[str]) -> Optional[UpstreamResponse]:
        key = (path, auth_token)
        if key not in self.cache:
            headers = [("X-Auth-Token", auth_token)] if auth_token else []
            started = time.monotonic()
            try:
                self.cache[key] = self.upstream.request(
                    "GET", path, headers, timeout_s=self.timeout_s
                )
            except UpstreamError:
                self.failed = True
                self.cache[key] = None
            finally:
                self.elapsed_ms += (time.monotonic() - started) * 1000.0
        return self.cache[key]


class Resolver:
    """Maps paths to values for one request.  Resource attributes come from
    GET probes against routes derived from the model, from explicit bind
    hints (request payload or validated-token representation), or, in the
    post phase, from the upstream response representation."""

    def __init__(
        self,
        rm: ResourceModel,
        routes: RouteTable,
        ctx: RequestContext,
        probes: _ProbeCache,
        variables: MonitorVariables,
        phase: str = "pre",
        upstream_response: Optional[UpstreamResponse] = None,
    ):
        self.rm = rm
        self.routes = routes
        self.ctx = ctx
        self.probes = probes
        self.variables = variables
        self.phase = phase
        self.upstream_response = upstream_response
        matched = routes.match(ctx.uri)
        self.route_entry = matched[0] if matched else None
        self.bindings: dict[tuple[str, ...], Binding] = {
            b.path.segments: b for b in rm.bindings
        }

    # -- entry point

    def __call__(self, path: E.Path) -> E.Value:
        ns = path.namespace
        if ns is E.Namespace.REQUEST:
            return self._resolve_request(path)
        if ns is E.Namespace.SELF:
            return self._resolve_self(path)
        if ns is E.Namespace.RESPONSE:
            return self._resolve_response(path)
        return self._resolve_resource(path)

    # -- namespaces

    def _resolve_request(self, path: E.Path) -> E.Value:
        if path.segments and path.segments[0] == "headers":
            name = "-".join(path.segments[1:]).lower()
            raw = self.ctx.headers.get(name)
            return E.text(raw) if raw is not None else E.ABSENT
        node = json_search(self.ctx.body, path.segments)
        return json_to_value(node)

    def _resolve_self(self, path: E.Path) -> E.Value:
        if path.segments == ("processing",):
            if self.phase == "post":
                return E.boolean(False)
            return E.boolean(self.variables.processing(self.ctx.uri))
        return E.ABSENT

    def _resolve_response(self, path: E.Path) -> E.Value:
        if self.upstream_response is None:
            return E.ABSENT
        if path.segments == ("status",):
            return E.integer(self.upstream_response.status)
        node = json_search(self.upstream_response.json(), path.segments)
        return json_to_value(node)

    def _resolve_resource(self, path: E.Path) -> E.Value:
        binding = self.bindings.get(path.segments)
        if binding is not None:
            return self._resolve_binding(binding)
        definition = self.rm.definition(path.head)
        if definition is None:
            return E.INVALID
        attr = definition.attribute(path.segments[1]) if len(path.segments) > 1 else None
        attr_type = attr.type if attr else None
        attr_name = path.segments[1] if len(path.segments) > 1 else None

        if (
            self.phase == "post"
            and self.route_entry is not None
            and definition.name.lower() == self.route_entry.definition.lower()
        ):
            value = self._from_upstream_response(definition.name, attr_name, attr_type)
            if value is not None:
                return value

        return self._probe_value(definition.name, attr_name, attr_type)

    def _resolve_binding(self, binding: Binding) -> E.Value:
        attr_type = None
        definition = self.rm.definition(binding.path.head)
        if definition and len(binding.path.segments) > 1:
            attr = definition.attribute(binding.path.segments[1])
            attr_type = attr.type if attr else None
        if binding.source == "request":
            node = json_walk(self.ctx.body, binding.json_path)
            return json_to_value(node, attr_type)
        # token-representation source: validate the caller's token upstream
        resp = self._token_probe()
        if resp is None:
            return E.INVALID
        if resp.status == 200:
            return json_to_value(json_search(resp.json(), binding.json_path), attr_type)
        if resp.status == 404:
            return E.ABSENT
        return E.INVALID

    def _from_upstream_response(
        self, definition: str, attr_name: Optional[str], attr_type: Optional[str]
    ) -> Optional[E.Value]:
        resp = self.upstream_response
        if resp is None or attr_name is None:
            return None
        if definition.lower() == "token" and attr_name == "token":
            subject = resp.header("X-Subject-Token")
            if subject:
                return E.text(subject)
        if not resp.body:
            return None  # no representation; fall back to a re-probe
        doc = resp.json()
        if doc is None:
            return E.INVALID  # unparseable upstream body
        node = json_search(doc, (attr_name,))
        if node is None:
            return E.ABSENT
        return json_to_value(node, attr_type)

    def _token_probe(self) -> Optional[UpstreamResponse]:
        entry = self.routes.for_definition("token")
        if entry is None or "{" in entry.uri_template:
            return None
        return self.probes.get(entry.uri_template, self.ctx.auth_token())

    def _probe_value(
        self, definition: str, attr_name: Optional[str], attr_type: Optional[str]
    ) -> E.Value:
        resp: Optional[UpstreamResponse] = None
        if (
            self.route_entry is not None
            and definition.lower() == self.route_entry.definition.lower()
        ):
            resp = self.probes.get(self.ctx.uri, self.ctx.auth_token())
        else:
            entry = self.routes.for_definition(definition)
            if entry is not None and "{" not in entry.uri_template:
                resp = self.probes.get(entry.uri_template, self.ctx.auth_token())
            else:
                # identity not determinable from the request
                return E.ABSENT
        if resp is None:
            return E.INVALID  # transport failure (fail-closed)
        if resp.status == 404:
            return E.ABSENT
        if resp.status != 200:
            return E.INVALID
        if attr_name is None:
            return E.count(1)
        node = json_search(resp.json(), (attr_name,))
        if node is None:
            return E.ABSENT
        return json_to_value(node, attr_type)

    def requester_name(self) -> Optional[str]:
        for (path, _token), resp in self.probes.cache.items():
            if resp is not None and resp.status == 200:
                node = json_search(resp.json(), ("token", "user", "name"))
                if isinstance(node, str):
                    return node
        return None


# ---------------------------------------------------------------------------
# Monitor


@dataclass
class MonitorResult:
    status: int
    headers: list[tuple[str, str]]
    body: bytes
    verdict: Optional[Verdict] = None
    violation: Optional[ViolationRecord] = None


class Monitor:
    def __init__(
        self,
        rm: ResourceModel,
        routes: RouteTable,
        contracts: list[Contract],
        upstream: HttpUpstream,
        probe_timeout_s: float = 2.0,
        paper_status: bool = False,
        audit_get: bool = False,
        state_invariants: Optional[list[tuple[str, E.Expression]]] = None,
    ):
        self.rm = rm
        self.routes = routes
        self.contracts = {(c.method, c.uri_template): c for c in contracts}
        self.upstream = upstream
        self.probe_timeout_s = probe_timeout_s
        self.paper_status = paper_status
        self.audit_get = audit_get
        self.state_invariants = state_invariants or []
        self.variables = MonitorVariables()

    # -- environment construction (exposed for direct testing)

    def resolve_pre_env(
        self, ctx: RequestContext, contract: Contract, probes: Optional[_ProbeCache] = None
    ) -> tuple[E.Environment, Snapshot]:
        probes = probes or _ProbeCache(self.upstream, self.probe_timeout_s)
        resolver = Resolver(
            self.rm, self.routes, ctx, probes, self.variables, phase="pre"
        )
        env = E.Environment(resolver, now=ctx.arrival_time, phase="pre")
        bindings = {p: env.lookup(p) for p in sorted(contract.snapshot_paths, key=str)}
        return env, Snapshot(bindings=bindings, captured_at=ctx.arrival_time)

    def resolve_post_env(
        self,
        ctx: RequestContext,
        contract: Contract,
        upstream_response: UpstreamResponse,
        snapshot: Snapshot,
        probes: Optional[_ProbeCache] = None,
    ) -> E.Environment:
        probes = probes or _ProbeCache(self.upstream, self.probe_timeout_s)
        resolver = Resolver(
            self.rm,
            self.routes,
            ctx,
            probes,
            self.variables,
            phase="post",
            upstream_response=upstream_response,
        )
        return E.Environment(
            resolver, now=ctx.arrival_time, phase="post", snapshot=snapshot.bindings
        )

    # -- checks

    def check_precondition(
        self, contract: Contract, env: E.Environment
    ) -> list[tuple[str, E.TriBool]]:
        """Empty list means pass; otherwise the failing top-level conjuncts."""
        failed = []
        for conjunct in E.conjuncts(contract.pre):
            value = E.evaluate(conjunct, env)
            if value is not E.TRUE:
                failed.append((E.to_text(conjunct), value))
        return failed

    def check_postcondition(
        self, contract: Contract, env: E.Environment
    ) -> list[tuple[str, E.TriBool]]:
        failed = []
        for conjunct in E.conjuncts(contract.post):
            value = E.evaluate(conjunct, env)
            if value is E.TRUE:
                continue
            if isinstance(conjunct, E.Implies):
                antecedent = E._eval(conjunct.left, env, antecedent=True)
                if antecedent is E.TRUE:
                    # name the failing consequent conjuncts for diagnosis
                    for part in E.conjuncts(conjunct.right):
                        part_value = E.evaluate(part, env)
                        if part_value is not E.TRUE:
                            failed.append((E.to_text(part), part_value))
                    continue
            failed.append((E.to_text(conjunct), value))
        return failed

    # -- pipeline

    def handle(self, ctx: RequestContext, raw_body: bytes) -> MonitorResult:
        started = time.monotonic()
        matched = self.routes.match(ctx.uri)
        if matched is None:
            return _error(404, "no such resource")
        entry, params = matched
        ctx.path_params = params
        if ctx.method not in entry.allowed_methods:
            allow = ", ".join(sorted(entry.allowed_methods))
            result = _error(405, "method not allowed", [("Allow", allow)])
            return result

        if ctx.method == "GET":
            return self._forward_get(ctx, raw_body)

        contract = self.contracts.get((ctx.method, entry.uri_template))
        if contract is None:
            return _error(405, "unmodeled method",
                          [("Allow", ", ".join(sorted(entry.allowed_methods)))])

        probes = _ProbeCache(self.upstream, self.probe_timeout_s)
        env, snapshot = self.resolve_pre_env(ctx, contract, probes)
        failed = self.check_precondition(contract, env)
        resolver: Resolver = env.resolver  # type: ignore[assignment]

        if not failed and not self.variables.acquire(ctx.uri):
            # lost the test-and-set race: another side-effect call is in
            # flight on this resource
            failed = [("self.processing=False", E.FALSE)]

        if failed:
            verdict = Verdict(
                outcome="pre_violation",
                failed_atoms=failed,
                contract_id=contract.id,
                probe_ms=probes.elapsed_ms,
                total_ms=(time.monotonic() - started) * 1000.0,
            )
            record = ViolationRecord(
                timestamp=datetime.now(timezone.utc),
                verdict=verdict,
                method=ctx.method,
                uri=ctx.uri,
                requester=resolver.requester_name(),
            )
            return self._violation_response(verdict, record, ctx)

        upstream_started = time.monotonic()
        try:
            response = self.upstream.request(
                ctx.method,
                ctx.uri,
                list(_forwardable(ctx.headers)),
                raw_body,
            )
        except UpstreamError:
            self.variables.release(ctx.uri)
            verdict = Verdict(
                outcome="post_violation",
                failed_atoms=[("upstream reachable", E.UNKNOWN)],
                contract_id=contract.id,
                probe_ms=probes.elapsed_ms,
                upstream_ms=(time.monotonic() - upstream_started) * 1000.0,
                total_ms=(time.monotonic() - started) * 1000.0,
            )
            record = ViolationRecord(
                timestamp=datetime.now(timezone.utc),
                verdict=verdict,
                method=ctx.method,
                uri=ctx.uri,
                requester=resolver.requester_name(),
            )
            return MonitorResult(
                status=504,
                headers=[("Content-Type", "application/json")],
                body=_violation_body(verdict, ctx),
                verdict=verdict,
                violation=record,
            )
        upstream_ms = (time.monotonic() - upstream_started) * 1000.0
        self.variables.release(ctx.uri)

        post_probes = _ProbeCache(self.upstream, self.probe_timeout_s)
        post_env = self.resolve_post_env(ctx, contract, response, snapshot, post_probes)
        post_failed = self.check_postcondition(contract, post_env)
        total_ms = (time.monotonic() - started) * 1000.0
        verdict = Verdict(
            outcome="post_violation" if post_failed else "pass",
            failed_atoms=post_failed,
            contract_id=contract.id,
            probe_ms=probes.elapsed_ms + post_probes.elapsed_ms,
            upstream_ms=upstream_ms,
            total_ms=total_ms,
        )
        if post_failed:
            record = ViolationRecord(
                timestamp=datetime.now(timezone.utc),
                verdict=verdict,
                method=ctx.method,
                uri=ctx.uri,
                requester=resolver.requester_name(),
                upstream_status=response.status,
            )
            return self._violation_response(verdict, record, ctx)

        return MonitorResult(
            status=response.status,
            headers=_strip_hop_by_hop(response.headers),
            body=response.body,
            verdict=verdict,
        )

    def _forward_get(self, ctx: RequestContext, raw_body: bytes) -> MonitorResult:
        violation = None
        if self.audit_get and self.state_invariants:
            violation = self._audit(ctx)
        try:
            response = self.upstream.request(
                ctx.method, ctx.uri, list(_forwardable(ctx.headers)), raw_body
            )
        except UpstreamError:
            return _error(504, "upstream unreachable")
        return MonitorResult(
            status=response.status,
            headers=_strip_hop_by_hop(response.headers),
            body=response.body,
            verdict=Verdict(outcome="pass"),
            violation=violation,
        )

    def _audit(self, ctx: RequestContext) -> Optional[ViolationRecord]:
        """Optional mode: on GET, check that at least one state invariant
        currently holds; a service in no modeled state is reported."""
        probes = _ProbeCache(self.upstream, self.probe_timeout_s)
        resolver = Resolver(self.rm, self.routes, ctx, probes, self.variables, "pre")
        env = E.Environment(resolver, now=ctx.arrival_time)
        results = [
            (name, E.evaluate(inv, env)) for name, inv in self.state_invariants
        ]
        if any(value is E.TRUE for _, value in results):
            return None
        verdict = Verdict(
            outcome="audit_violation",
            failed_atoms=[(name, value) for name, value in results],
            contract_id="state-audit",
            probe_ms=probes.elapsed_ms,
        )
        return ViolationRecord(
            timestamp=datetime.now(timezone.utc),
            verdict=verdict,
            method=ctx.method,
            uri=ctx.uri,
        )

    def _violation_response(
        self, verdict: Verdict, record: ViolationRecord, ctx: RequestContext
    ) -> MonitorResult:
        if self.paper_status:
            status = 404
        else:
            status = 412 if verdict.outcome == "pre_violation" else 502
        return MonitorResult(
            status=status,
            headers=[("Content-Type", "application/json")],
            body=_violation_body(verdict, ctx),
            verdict=verdict,
            violation=record,
        )


def _violation_body(verdict: Verdict, ctx: RequestContext) -> bytes:
    phase = "pre" if verdict.outcome == "pre_violation" else "post"
    doc = {
        "phase": phase,
        "contract": verdict.contract_id,
        "failed": [
            {"expr": text, "value": value.value}
            for text, value in verdict.failed_atoms
        ],
        "request": {"method": ctx.method, "uri": ctx.uri},
    }
    return json.dumps(doc, sort_keys=True).encode("utf-8")


def _error(
    status: int, message: str, headers: Optional[list[tuple[str, str]]] = None
) -> MonitorResult:
    body = json.dumps({"error": message}).encode("utf-8")
    return MonitorResult(
        status=status,
        headers=(headers or []) + [("Content-Type", "application/json")],
        body=body,
    )


def _forwardable(headers: dict[str, str]):
    for name, value in headers.items():
        if name.lower() in HOP_BY_HOP or name.lower() == "host":
            continue
        yield (name, value)


def _strip_hop_by_hop(headers: list[tuple[str, str]]) -> list[tuple[str, str]]:
    return [(k, v) for k, v in headers if k.lower() not in HOP_BY_HOP]
