"""Runtime monitor tests: JSON helpers, request context, monitor variables,
and the full validation pipeline against the in-process harness."""

import json
from datetime import datetime, timedelta, timezone

from contractgate import expr as E
from contractgate import mock_keystone as mk
from contractgate.monitor import (
    MonitorVariables,
    RequestContext,
    Snapshot,
    json_search,
    json_to_value,
    json_walk,
)
from conftest import password_body, token_body


class TestJsonHelpers:
    DOC = {"token": {"roles": [{"name": "admin"}], "user": {"id": "u-1"}}}

    def test_walk_exact_path(self):
        assert json_walk(self.DOC, ("token", "user", "id")) == "u-1"

    def test_walk_list_index(self):
        assert json_walk(self.DOC, ("token", "roles", "0", "name")) == "admin"

    def test_walk_missing_is_none(self):
        assert json_walk(self.DOC, ("token", "ghost")) is None

    def test_search_skips_envelopes(self):
        assert json_search(self.DOC, ("roles", "0", "name")) == "admin"
        assert json_search(self.DOC, ("id",)) == "u-1"

    def test_search_prefers_exact_match(self):
        doc = {"id": "outer", "inner": {"id": "inner"}}
        assert json_search(doc, ("id",)) == "outer"

    def test_to_value_typing(self):
        assert json_to_value(None) == E.ABSENT
        assert json_to_value(True) == E.boolean(True)
        assert json_to_value(3) == E.integer(3)
        assert json_to_value("x") == E.text("x")
        ts = json_to_value("2026-08-01T12:00:00Z", "timestamp")
        assert ts.kind is E.Kind.TIMESTAMP
        assert json_to_value("junk", "timestamp") == E.INVALID
        assert json_to_value([1, 2]).kind is E.Kind.DOCUMENT


class TestRequestContext:
    def test_unparseable_body_becomes_none(self):
        ctx = RequestContext.build("POST", "/x", {}, b"{not json")
        assert ctx.body is None

    def test_header_names_lowercased(self):
        ctx = RequestContext.build("GET", "/x", {"X-Auth-Token": "t"}, b"")
        assert ctx.headers["x-auth-token"] == "t"

    def test_auth_token_header_beats_body(self):
        raw = json.dumps(token_body("body-token")).encode()
        ctx = RequestContext.build("POST", "/x", {"X-Auth-Token": "hdr"}, raw)
        assert ctx.auth_token() == "hdr"

    def test_auth_token_from_body(self):
        raw = json.dumps(token_body("body-token")).encode()
        ctx = RequestContext.build("POST", "/x", {}, raw)
        assert ctx.auth_token() == "body-token"

    def test_auth_token_absent(self):
        assert RequestContext.build("GET", "/x", {}, b"").auth_token() is None


class TestMonitorVariables:
    def test_acquire_is_test_and_set(self):
        v = MonitorVariables()
        assert v.acquire("/a")
        assert not v.acquire("/a")
        assert v.acquire("/b")
        v.release("/a")
        assert v.acquire("/a")

    def test_release_is_idempotent(self):
        v = MonitorVariables()
        v.release("/never-acquired")
        assert v.acquire("/never-acquired")


class TestPipeline:
    def test_unrouted_uri_is_404(self, harness):
        status, _, _ = harness.call("GET", "/v9/bogus")
        assert status == 404

    def test_disallowed_method_is_405_with_allow(self, harness):
        status, headers, _ = harness.call("PATCH", "/v3/auth/tokens")
        assert status == 405
        assert set(dict(headers)["Allow"].split(", ")) == {"GET", "POST"}

    def test_get_is_forwarded(self, harness):
        token = harness.authenticate("admin", "secret")
        status, _, body = harness.call(
            "GET", "/v3/users/u-alice", headers={"X-Auth-Token": token}
        )
        assert status == 200
        assert json.loads(body)["user"]["id"] == "u-alice"

    def test_missing_credentials_block_before_upstream_post(self, harness):
        # no user name anywhere: the credential cannot be established
        # pre-flight, so the request never reaches the upstream POST
        before = harness.service.side_effect_count()
        payload = {
            "auth": {
                "identity": {
                    "methods": ["password"],
                    "password": {"user": {"password": "whatever"}},
                }
            }
        }
        status, _, body = harness.call("POST", "/v3/auth/tokens", payload)
        assert status == 412
        doc = json.loads(body)
        assert doc["phase"] == "pre"
        assert doc["contract"] == "POST /v3/auth/tokens"
        assert harness.service.side_effect_count() == before

    def test_wrong_password_is_caught_post_flight(self, harness):
        # a present-but-wrong credential passes the pre check (the wrapper
        # cannot verify secrets); the upstream rejects it and the missing
        # token then fails the postcondition
        status, _, body = harness.call(
            "POST", "/v3/auth/tokens", password_body("admin", "wrong")
        )
        assert status == 502
        assert json.loads(body)["phase"] == "post"

    def test_malformed_body_blocks_fail_closed(self, harness):
        before = harness.service.side_effect_count()
        status, _, _ = harness.call("POST", "/v3/auth/tokens", raw=b"{broken")
        assert status == 412
        assert harness.service.side_effect_count() == before

    def test_admin_delete_relays_204(self, harness):
        token = harness.authenticate("admin", "secret")
        status, _, _ = harness.call(
            "DELETE", "/v3/users/u-alice", headers={"X-Auth-Token": token}
        )
        assert status == 204
        status, _, _ = harness.call(
            "GET", "/v3/users/u-alice", headers={"X-Auth-Token": token}
        )
        assert status == 404

    def test_non_admin_delete_names_role_conjunct(self, harness):
        token = harness.authenticate("alice", "wonder")
        status, _, body = harness.call(
            "DELETE", "/v3/users/u-admin", headers={"X-Auth-Token": token}
        )
        assert status == 412
        doc = json.loads(body)
        assert doc["failed"] == [{"expr": "user.role='admin'", "value": "false"}]

    def test_missing_token_delete_is_blocked(self, harness):
        before = harness.service.side_effect_count()
        status, _, _ = harness.call("DELETE", "/v3/users/u-alice")
        assert status == 412
        assert harness.service.side_effect_count() == before

    def test_in_flight_resource_blocks_concurrent_side_effect(self, harness):
        token = harness.authenticate("admin", "secret")
        uri = "/v3/users/u-alice"
        assert harness.gateway.monitor.variables.acquire(uri)
        try:
            status, _, body = harness.call(
                "DELETE", uri, headers={"X-Auth-Token": token}
            )
            assert status == 412
            assert any(
                "self.processing" in atom["expr"]
                for atom in json.loads(body)["failed"]
            )
        finally:
            harness.gateway.monitor.variables.release(uri)
        status, _, _ = harness.call("DELETE", uri, headers={"X-Auth-Token": token})
        assert status == 204

    def test_unreachable_upstream_get_is_504(self, harness_factory):
        h = harness_factory()
        h._servers[0].shutdown()
        h._servers[0].server_close()
        status, _, _ = h.call("GET", "/v3/users")
        assert status == 504

    def test_expired_token_blocks_delete(self, harness_factory):
        # the mock's clock starts at real time (so freshly issued tokens are
        # valid against the monitor's wall clock), then jumps past the TTL
        clock_value = [datetime.now(timezone.utc)]
        h = harness_factory(clock=lambda: clock_value[0])
        token = h.authenticate("admin", "secret")
        clock_value[0] += timedelta(hours=2)
        status, _, body = h.call(
            "DELETE", "/v3/users/u-alice", headers={"X-Auth-Token": token}
        )
        assert status == 412
        assert any(
            "expires_at" in atom["expr"] or "token.token" in atom["expr"]
            for atom in json.loads(body)["failed"]
        )


class TestDoubleCheck:
    def test_post_check_catches_forged_precondition_environment(self, harness_factory):
        """Even with a pre-phase bypass (forged snapshot claiming the caller
        is an admin) and an upstream that wrongly allows the delete, the
        postcondition still fails on the role conjunct."""
        h = harness_factory(mk.FaultProfile(allow_nonadmin_delete=True))
        alice = h.authenticate("alice", "wonder")
        monitor = h.gateway.monitor
        contract = monitor.contracts[("DELETE", "/v3/users/{user_id}")]
        ctx = RequestContext.build(
            "DELETE", "/v3/users/u-admin", {"X-Auth-Token": alice}, b""
        )
        now = ctx.arrival_time
        forged = {
            "self.processing": E.boolean(False),
            "token.token": E.text(alice),
            "token.expires_at": E.timestamp(now + timedelta(hours=1)),
            "user.id": E.text("u-admin"),
            "user.role": E.text("admin"),
        }
        snapshot = Snapshot(
            {p: forged[str(p)] for p in contract.snapshot_paths}, now
        )
        response = monitor.upstream.request(
            "DELETE", "/v3/users/u-admin", [("X-Auth-Token", alice)]
        )
        assert response.status == 204  # the seeded regression let it through
        env = monitor.resolve_post_env(ctx, contract, response, snapshot)
        failed = monitor.check_postcondition(contract, env)
        assert ("user.role='admin'", E.FALSE) in failed
