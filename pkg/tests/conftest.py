"""Shared fixtures: loaded fixture model, derived contracts, and an
in-process mock + gateway harness."""

import http.client
import json
import threading
from dataclasses import dataclass, field
from typing import Optional

import pytest

from contractgate import keystone_fixture_path
from contractgate import mock_keystone as mk
from contractgate.contracts import Contract, derive_contracts
from contractgate.gateway import Gateway, GatewayConfig, build_gateway, make_server
from contractgate.model import load_model


# Reference transcriptions of the expected POST-token and DELETE-user
# contracts, used as golden oracles for logical-equivalence checks.
GOLDEN = {
    ("POST", "/v3/auth/tokens", "pre"): (
        "self.processing = False and "
        "(user.credential->size()=1 or token.token->size()=1 and "
        "clockTime <= token.expires_at) and "
        "((request.scope->size()=1 and request.scope <> 'unscope' and "
        "not request.scope.oclIsInvalid()) or "
        "(request.scope->size()=0 or request.scope.oclIsInvalid() or "
        "request.scope = 'unscope'))"
    ),
    ("POST", "/v3/auth/tokens", "post"): (
        "(self.processing = False and "
        "(user.credential->size()=1 or token.token->size()=1 and "
        "clockTime <= token.expires_at) "
        "==> self.processing = False and token.token->size()=1 and "
        "clockTime <= token.expires_at) and "
        "(request.scope->size()=1 and request.scope <> 'unscope' and "
        "not request.scope.oclIsInvalid() "
        "==> token.token->size()=1 and token.catalog->size()=1) and "
        "(request.scope->size()=0 or request.scope.oclIsInvalid() or "
        "request.scope = 'unscope' "
        "==> token.token->size()=1 and token.catalog->size()=0)"
    ),
    ("DELETE", "/v3/users/{user_id}", "pre"): (
        "self.processing = False and token.token->size()=1 and "
        "clockTime <= token.expires_at and user.id->size()=1 and "
        "user.role = 'admin'"
    ),
    ("DELETE", "/v3/users/{user_id}", "post"): (
        "self.processing = False and token.token->size()=1 and "
        "clockTime <= token.expires_at and user.id->size()=1 "
        "==> token.token->size()=1 and user.id->size()=0 and "
        "user.role = 'admin'"
    ),
}


def password_body(name: str, password: str, scope=None) -> dict:
    auth = {
        "identity": {
            "methods": ["password"],
            "password": {"user": {"name": name, "password": password}},
        }
    }
    if scope is not None:
        auth["scope"] = scope
    return {"auth": auth}


def token_body(token_id: str, scope=None) -> dict:
    auth = {"identity": {"methods": ["token"], "token": {"id": token_id}}}
    if scope is not None:
        auth["scope"] = scope
    return {"auth": auth}


def http_call(port: int, method: str, path: str, body=None, headers=None,
              raw: Optional[bytes] = None):
    """Issue one request to 127.0.0.1:port; returns (status, headers, body)."""
    conn = http.client.HTTPConnection("127.0.0.1", port, timeout=15)
    payload = raw
    if payload is None and body is not None:
        payload = json.dumps(body).encode("utf-8")
    conn.request(method, path, body=payload, headers=headers or {})
    resp = conn.getresponse()
    data = resp.read()
    result = (resp.status, resp.getheaders(), data)
    conn.close()
    return result


@dataclass
class Harness:
    store: mk.IdentityStore
    service: mk.MockKeystone
    gateway: Gateway
    mock_port: int
    port: int
    _servers: list = field(default_factory=list)

    def call(self, method, path, body=None, headers=None, raw=None):
        return http_call(self.port, method, path, body=body, headers=headers, raw=raw)

    def call_mock(self, method, path, body=None, headers=None, raw=None):
        return http_call(self.mock_port, method, path, body=body,
                         headers=headers, raw=raw)

    def authenticate(self, name: str, password: str, scope=None) -> str:
        status, headers, _ = self.call(
            "POST", "/v3/auth/tokens", password_body(name, password, scope)
        )
        assert status == 201, f"authentication failed with {status}"
        return dict(headers)["X-Subject-Token"]

    def close(self):
        for server in self._servers:
            server.shutdown()
            server.server_close()
        self.gateway.violation_log.close()


def boot_harness(faults: mk.FaultProfile = mk.FaultProfile(), *,
                 clock=None, seed=None, log_path=None,
                 **config_overrides) -> Harness:
    store = mk.IdentityStore(seed=seed, clock=clock, faults=faults)
    service = mk.MockKeystone(store)
    mock_server = mk.make_server(service)
    threading.Thread(target=mock_server.serve_forever, daemon=True).start()
    mock_port = mock_server.server_address[1]

    cfg = GatewayConfig(
        listen_address="127.0.0.1:0",
        upstream_base_url=f"http://127.0.0.1:{mock_port}",
        model_path=keystone_fixture_path(),
        log_path=log_path,
        **config_overrides,
    )
    gateway = build_gateway(cfg)
    gateway_server = make_server(gateway)
    threading.Thread(target=gateway_server.serve_forever, daemon=True).start()

    return Harness(
        store=store,
        service=service,
        gateway=gateway,
        mock_port=mock_port,
        port=gateway_server.server_address[1],
        _servers=[mock_server, gateway_server],
    )


@pytest.fixture
def harness_factory():
    created = []

    def factory(*args, **kwargs):
        h = boot_harness(*args, **kwargs)
        created.append(h)
        return h

    yield factory
    for h in created:
        h.close()


@pytest.fixture
def harness(harness_factory):
    return harness_factory()


@pytest.fixture(scope="session")
def fixture_document() -> bytes:
    with open(keystone_fixture_path(), "rb") as fh:
        return fh.read()


@pytest.fixture(scope="session")
def loaded_model(fixture_document):
    return load_model(fixture_document)


@pytest.fixture(scope="session")
def fixture_contracts(loaded_model) -> dict[tuple[str, str], Contract]:
    _, bm, rules = loaded_model
    return {(c.method, c.uri_template): c for c in derive_contracts(bm, rules)}
