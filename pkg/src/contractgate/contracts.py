"""Derive per-method contracts from the behavioral model and fold the
security rules into them.

The functional precondition of a method is the disjunction, over every
transition it triggers, of the source-state invariant conjoined with the
transition guard.  The postcondition is a conjunction of implications: if a
transition's firing condition held before execution, the target-state
invariant (and effect) must hold afterwards.  Actor annotations lower to a
``user.role='<role>'`` predicate on the precondition and on the transition's
consequent.  Conditional security rules add their ``if`` disjunction to the
precondition and an ``if ==> then`` conjunct to the postcondition;
unconditional rules are conjoined to both sides (the double check).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import expr as E
from .model import BehavioralModel, SecurityRule, Transition


class UnmodeledMethodError(LookupError):
    """No transition is triggered by the requested (method, uri) pair."""


@dataclass(frozen=True)
class Contract:
    method: str
    uri_template: str
    pre: E.Expression
    post: E.Expression
    snapshot_paths: frozenset[E.Path] = field(default_factory=frozenset)

    @property
    def id(self) -> str:
        return f"{self.method} {self.uri_template}"


_SNAPSHOT_NAMESPACES = (E.Namespace.RESOURCE, E.Namespace.REQUEST, E.Namespace.SELF)


def _snapshot_paths(pre: E.Expression, post: E.Expression) -> frozenset[E.Path]:
    paths = E.free_paths(pre) | E.antecedent_paths(post)
    return frozenset(p for p in paths if p.namespace in _SNAPSHOT_NAMESPACES)


def _actor_predicate(role: str) -> E.Expression:
    return E.Compare("=", E.PathRef(E.make_path(["user", "role"])), E.Literal(role))


def derive_functional_contract(
    method: str, uri_template: str, bm: BehavioralModel
) -> Contract:
    matching = [
        t
        for t in bm.transitions
        if t.http_method == method and t.uri_template == uri_template
    ]
    if not matching:
        raise UnmodeledMethodError(f"unmodeled method: {method} {uri_template}")

    pre_terms: list[E.Expression] = []
    post_terms: list[E.Expression] = []
    for t in matching:
        firing = _firing_condition(t, bm)
        pre_term = firing
        consequent = _result_condition(t, bm)
        if t.actor_role:
            actor = _actor_predicate(t.actor_role)
            pre_term = E.And(pre_term, actor)
            consequent = E.And(consequent, actor)
        pre_terms.append(E.elide_true(pre_term))
        post_terms.append(E.elide_true(E.Implies(firing, consequent)))

    pre = E.disjoin(pre_terms)
    post = E.conjoin(post_terms)
    return Contract(
        method=method,
        uri_template=uri_template,
        pre=pre,
        post=post,
        snapshot_paths=_snapshot_paths(pre, post),
    )


def _firing_condition(t: Transition, bm: BehavioralModel) -> E.Expression:
    source = bm.state(t.source)
    invariant = source.invariant if source else E.LIT_TRUE
    guard = t.guard if t.guard is not None else E.LIT_TRUE
    return E.elide_true(E.And(invariant, guard))


def _result_condition(t: Transition, bm: BehavioralModel) -> E.Expression:
    target = bm.state(t.target)
    invariant = target.invariant if target else E.LIT_TRUE
    effect = t.effect if t.effect is not None else E.LIT_TRUE
    return E.elide_true(E.And(invariant, effect))


def merge_security_rules(c: Contract, rules: list[SecurityRule]) -> Contract:
    applicable = [
        r
        for r in rules
        if r.http_method == c.method and r.uri_template == c.uri_template
    ]
    if not applicable:
        return c

    pre = c.pre
    post = c.post
    conditional = [r for r in applicable if r.kind == "conditional"]
    if conditional:
        pre = E.And(pre, E.disjoin([r.if_expr for r in conditional]))
        for r in conditional:
            post = E.And(post, E.Implies(r.if_expr, r.then_expr))
    for r in applicable:
        if r.kind == "unconditional":
            pre = E.And(pre, r.rule_expr)
            post = E.And(post, r.rule_expr)

    return Contract(
        method=c.method,
        uri_template=c.uri_template,
        pre=pre,
        post=post,
        snapshot_paths=_snapshot_paths(pre, post),
    )


def derive_contracts(bm: BehavioralModel, rules: list[SecurityRule]) -> list[Contract]:
    """All contracts for the model, one per distinct (method, uri) trigger,
    in deterministic order."""
    seen: list[tuple[str, str]] = []
    for t in bm.transitions:
        key = (t.http_method, t.uri_template)
        if key not in seen:
            seen.append(key)
    return [
        merge_security_rules(derive_functional_contract(m, uri, bm), rules)
        for m, uri in seen
    ]


def render_contract(c: Contract) -> str:
    lines = [
        f"contract {c.method} {c.uri_template}",
        f"  pre:  {E.to_text(c.pre)}",
        f"  post: {E.to_text(c.post)}",
    ]
    return "\n".join(lines) + "\n"


def render_contracts(contracts: list[Contract]) -> str:
    return "\n".join(render_contract(c) for c in contracts)
