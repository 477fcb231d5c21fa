"""Parser, printer and three-valued evaluator unit tests."""

import random
from datetime import datetime, timezone

import pytest

from contractgate import expr as E
from oracle import (
    F,
    T,
    TRI_TO_TRIBOOL,
    U,
    environment_for,
    gen_boolean_expr,
    gen_expression_text,
    oracle_eval,
)

NOW = datetime(2026, 8, 1, 12, 0, 0, tzinfo=timezone.utc)


def env_from(table: dict, now=NOW) -> E.Environment:
    values = {E.make_path(key.split(".")): value for key, value in table.items()}
    return E.Environment(lambda p: values.get(p, E.ABSENT), now)


# ---------------------------------------------------------------------------
# Parsing


class TestParse:
    def test_conjunction_of_size_and_flag(self):
        e = E.parse_expression("Token.token->size()=0 and self.processing = False")
        assert isinstance(e, E.And)
        left, right = e.left, e.right
        assert isinstance(left, E.Compare) and left.op == "="
        assert isinstance(left.left, E.SizeOf)
        assert left.left.path == E.make_path(["Token", "token"])
        assert left.right == E.Literal(0)
        assert isinstance(right, E.Compare) and right.op == "="
        assert right.left == E.PathRef(E.make_path(["self", "processing"]))
        assert right.right == E.Literal(False)

    def test_bare_literal(self):
        assert E.parse_expression("True") == E.Literal(True)

    def test_clock_comparison(self):
        e = E.parse_expression("token.expires_at <= clockTime")
        assert e == E.Compare(
            "<=", E.PathRef(E.make_path(["token", "expires_at"])), E.ClockTime()
        )

    def test_resource_head_is_case_insensitive(self):
        upper = E.parse_expression("Token.token->size()=0")
        lower = E.parse_expression("token.token->size()=0")
        assert upper == lower

    def test_implies_is_right_associative(self):
        e = E.parse_expression("a.x=1 ==> b.x=2 ==> c.x=3")
        assert isinstance(e, E.Implies)
        assert isinstance(e.right, E.Implies)
        assert not isinstance(e.left, E.Implies)

    def test_precedence_and_binds_tighter_than_or(self):
        e = E.parse_expression("a.x=1 or b.x=2 and c.x=3")
        assert isinstance(e, E.Or)
        assert isinstance(e.right, E.And)

    def test_precedence_or_binds_tighter_than_implies(self):
        e = E.parse_expression("a.x=1 or b.x=2 ==> c.x=3")
        assert isinstance(e, E.Implies)
        assert isinstance(e.left, E.Or)

    def test_not_binds_tighter_than_and(self):
        e = E.parse_expression("not a.x.oclIsInvalid() and b.x=1")
        assert isinstance(e, E.And)
        assert isinstance(e.left, E.Not)

    def test_parentheses_override_precedence(self):
        e = E.parse_expression("a.x=1 and (b.x=2 or c.x=3)")
        assert isinstance(e, E.And)
        assert isinstance(e.right, E.Or)

    def test_syntax_error_reports_offset_and_expected(self):
        with pytest.raises(E.ExprSyntaxError) as info:
            E.parse_expression("a.x=1 and")
        assert info.value.offset == 9
        assert info.value.expected
        assert "offset 9" in str(info.value)

    def test_syntax_error_on_garbage_operator(self):
        with pytest.raises(E.ExprSyntaxError):
            E.parse_expression("a.x ~ 1")

    def test_string_literal(self):
        e = E.parse_expression("user.role = 'admin'")
        assert e.right == E.Literal("admin")


# ---------------------------------------------------------------------------
# Printing


class TestPrint:
    def test_compact_comparisons_spaced_connectives(self):
        e = E.parse_expression("user.role = 'admin' and token.token->size()=1")
        assert E.to_text(e) == "user.role='admin' and token.token->size()=1"

    def test_parentheses_only_where_needed(self):
        e = E.parse_expression("a.x=1 and (b.x=2 or c.x=3)")
        assert E.to_text(e) == "a.x=1 and (b.x=2 or c.x=3)"
        e2 = E.parse_expression("(a.x=1 and b.x=2) or c.x=3")
        assert E.to_text(e2) == "a.x=1 and b.x=2 or c.x=3"

    def test_round_trip_on_generated_texts(self):
        rng = random.Random(424242)
        for _ in range(300):
            ast = E.parse_expression(gen_expression_text(rng))
            assert E.parse_expression(E.to_text(ast)) == ast


# ---------------------------------------------------------------------------
# Evaluation


class TestEvaluate:
    def test_size_of_absent_is_zero(self):
        e = E.parse_expression("Token.token->size()=0")
        assert E.evaluate(e, env_from({})) is E.TRUE

    def test_not_invalid_on_present_text(self):
        e = E.parse_expression("not request.scope.oclIsInvalid()")
        assert E.evaluate(e, env_from({"request.scope": E.text("project-x")})) is E.TRUE

    def test_absent_comparison_is_unknown(self):
        e = E.parse_expression("user.role = 'admin'")
        assert E.evaluate(e, env_from({})) is E.UNKNOWN

    def test_false_implies_unknown_is_true(self):
        e = E.parse_expression("self.a ==> self.b")
        env = env_from({"self.a": E.boolean(False), "self.b": E.INVALID})
        assert E.evaluate(e, env) is E.TRUE

    def test_invalid_operand_is_unknown(self):
        e = E.parse_expression("user.role = 'admin'")
        assert E.evaluate(e, env_from({"user.role": E.INVALID})) is E.UNKNOWN

    def test_size_counts(self):
        env = env_from(
            {"a.one": E.text("x"), "a.many": E.count(3), "a.bad": E.INVALID}
        )
        assert E.evaluate(E.parse_expression("a.one->size()=1"), env) is E.TRUE
        assert E.evaluate(E.parse_expression("a.many->size()=3"), env) is E.TRUE
        assert E.evaluate(E.parse_expression("a.bad->size()=0"), env) is E.TRUE
        assert E.evaluate(E.parse_expression("a.gone->size()=0"), env) is E.TRUE

    def test_is_invalid_never_unknown(self):
        env = env_from({"a.bad": E.INVALID, "a.ok": E.integer(5)})
        assert E.evaluate(E.parse_expression("a.bad.oclIsInvalid()"), env) is E.TRUE
        assert E.evaluate(E.parse_expression("a.gone.oclIsInvalid()"), env) is E.TRUE
        assert E.evaluate(E.parse_expression("a.ok.oclIsInvalid()"), env) is E.FALSE

    def test_clock_comparison_uses_env_now(self):
        env = env_from({"token.expires_at": E.timestamp(NOW.replace(hour=13))})
        assert E.evaluate(
            E.parse_expression("clockTime <= token.expires_at"), env
        ) is E.TRUE
        assert E.evaluate(
            E.parse_expression("token.expires_at <= clockTime"), env
        ) is E.FALSE

    def test_ordering_across_kinds_is_unknown(self):
        env = env_from({"a.t": E.text("zzz")})
        assert E.evaluate(E.parse_expression("a.t < 3"), env) is E.UNKNOWN

    def test_resolver_called_once_per_path(self):
        calls = []

        def resolver(path):
            calls.append(path)
            return E.boolean(True)

        env = E.Environment(resolver, NOW)
        e = E.parse_expression("self.p and self.p and self.p")
        assert E.evaluate(e, env) is E.TRUE
        assert len(calls) == 1

    def test_resolver_exception_folds_to_unknown(self):
        def resolver(path):
            raise RuntimeError("boom")

        env = E.Environment(resolver, NOW)
        assert E.evaluate(E.parse_expression("a.x = 1"), env) is E.UNKNOWN


class TestK3Tables:
    PAIRS = [(a, b) for a in (T, F, U) for b in (T, F, U)]

    def test_implies_matches_oracle_on_all_nine_pairs(self):
        e = E.parse_expression("self.a ==> self.b")
        pa, pb = E.make_path(["self", "a"]), E.make_path(["self", "b"])
        for a, b in self.PAIRS:
            assignment = {pa: a, pb: b}
            got = E.evaluate(e, environment_for(assignment, NOW))
            assert got is TRI_TO_TRIBOOL[oracle_eval(e, assignment)]

    def test_and_or_not_match_oracle(self):
        pa, pb = E.make_path(["self", "a"]), E.make_path(["self", "b"])
        for text in ("self.a and self.b", "self.a or self.b", "not self.a"):
            e = E.parse_expression(text)
            for a, b in self.PAIRS:
                assignment = {pa: a, pb: b}
                got = E.evaluate(e, environment_for(assignment, NOW))
                assert got is TRI_TO_TRIBOOL[oracle_eval(e, assignment)]


class TestOracleProperty:
    def test_evaluator_agrees_with_bruteforce_oracle(self):
        rng = random.Random(97)
        atoms = [E.make_path(["self", f"a{i}"]) for i in range(4)]
        tri = (T, F, U)
        for _ in range(150):
            e = gen_boolean_expr(rng, atoms)
            for combo in _all_assignments(atoms, tri):
                got = E.evaluate(e, environment_for(combo, NOW))
                assert got is TRI_TO_TRIBOOL[oracle_eval(e, combo)]

    def test_monotonicity_of_definedness(self):
        rng = random.Random(555)
        atoms = [E.make_path(["self", f"a{i}"]) for i in range(4)]
        for _ in range(150):
            e = gen_boolean_expr(rng, atoms)
            base = {p: rng.choice((T, F, U)) for p in atoms}
            unknowns = [p for p in atoms if base[p] == U]
            if not unknowns:
                base[rng.choice(atoms)] = U
                unknowns = [p for p in atoms if base[p] == U]
            before = E.evaluate(e, environment_for(base, NOW))
            refined = dict(base)
            refined[rng.choice(unknowns)] = rng.choice((T, F))
            after = E.evaluate(e, environment_for(refined, NOW))
            if before is E.TRUE:
                assert after is E.TRUE
            elif before is E.FALSE:
                assert after is E.FALSE


def _all_assignments(atoms, tri):
    import itertools

    for combo in itertools.product(tri, repeat=len(atoms)):
        yield dict(zip(atoms, combo))


# ---------------------------------------------------------------------------
# Path analysis and snapshot semantics


class TestPathAnalysis:
    def test_free_paths_of_invariant(self):
        e = E.parse_expression("Token.token->size()=0 and self.processing = False")
        assert E.free_paths(e) == {
            E.make_path(["token", "token"]),
            E.make_path(["self", "processing"]),
        }

    def test_free_paths_clock_only_is_empty(self):
        assert E.free_paths(E.parse_expression("clockTime <= clockTime")) == set()

    def test_antecedent_paths_single_implication(self):
        e = E.parse_expression("a.x=1 and b.y=2 ==> c.z=3")
        assert E.antecedent_paths(e) == {
            E.make_path(["a", "x"]),
            E.make_path(["b", "y"]),
        }

    def test_antecedent_paths_include_unconditional_conjuncts(self):
        e = E.parse_expression("d.w=4 and (a.x=1 ==> c.z=3)")
        assert E.antecedent_paths(e) == {
            E.make_path(["d", "w"]),
            E.make_path(["a", "x"]),
        }

    def test_no_implies_means_all_free_paths(self):
        e = E.parse_expression("a.x=1 and b.y=2")
        assert E.antecedent_paths(e) == E.free_paths(e)

    def test_snapshot_shadowing_only_in_antecedents(self):
        p = E.make_path(["a", "x"])
        env = E.Environment(
            lambda path: E.integer(2),
            NOW,
            phase="post",
            snapshot={p: E.integer(1)},
        )
        e = E.parse_expression("a.x=1 ==> a.x=2")
        # antecedent sees the snapshot (1), consequent the live value (2)
        assert E.evaluate(e, env) is E.TRUE


# ---------------------------------------------------------------------------
# Conjunct helpers, simplification, equivalence


class TestHelpers:
    def test_conjuncts_flatten(self):
        e = E.parse_expression("a.x=1 and b.y=2 and c.z=3")
        assert [E.to_text(c) for c in E.conjuncts(e)] == ["a.x=1", "b.y=2", "c.z=3"]

    def test_conjoin_disjoin_empty(self):
        assert E.conjoin([]) == E.Literal(True)
        assert E.disjoin([]) == E.Literal(False)

    def test_elide_true_drops_literal_true_conjuncts(self):
        e = E.And(E.Literal(True), E.parse_expression("a.x=1"))
        assert E.elide_true(e) == E.parse_expression("a.x=1")

    def test_elide_true_keeps_integer_one(self):
        e = E.And(E.Literal(1), E.parse_expression("a.x=1"))
        assert E.elide_true(e) == e

    def test_k3_equivalence_de_morgan(self):
        a = E.parse_expression("not (self.a and self.b)")
        b = E.parse_expression("not self.a or not self.b")
        assert E.k3_equivalent(a, b)

    def test_k3_equivalence_commutativity(self):
        assert E.k3_equivalent(
            E.parse_expression("self.a or self.b"),
            E.parse_expression("self.b or self.a"),
        )

    def test_k3_inequivalence(self):
        assert not E.k3_equivalent(
            E.parse_expression("self.a"), E.parse_expression("not self.a")
        )

    def test_excluded_middle_fails_in_k3(self):
        # `a or not a` is Unknown when a is Unknown, so it is not
        # equivalent to True — the fail-closed semantics depend on this.
        assert not E.k3_equivalent(
            E.parse_expression("self.a or not self.a"), E.Literal(True)
        )


class TestTimestamps:
    def test_parse_timestamp_accepts_z_suffix(self):
        dt = E.parse_timestamp("2026-08-01T12:00:00Z")
        assert dt == NOW

    def test_parse_timestamp_rejects_garbage(self):
        assert E.parse_timestamp("not-a-time") is None
