"""Rules and clauses as data, and their pure evaluation.

A rule is a chain of links.  Link 0 matches a fact and either produces the
output fact directly or a residual tuple named ``<rule>!0`` keyed by the next
link's key.  Each later link joins such a tuple with a fact of the same key.
"""

from __future__ import annotations

from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from typing import Any

from . import interset
from .events import Event, accumulate_all, freeze, key_json, namespace
from .expr import (
    ExprError,
    RangeTooWide,
    UnboundVariable,
    days_in_range,
    evaluate,
    is_var,
    ts_to_day,
    variables,
)

__all__ = [
    "FactPattern",
    "Guard",
    "InsecureRule",
    "Link",
    "RangeTooWide",
    "RuleDef",
    "RuleError",
    "UnboundKey",
    "UnboundVariable",
    "by_guard_check",
    "days_in_range",
    "eval_continuation",
    "eval_link0",
    "simulate_with",
    "ts_to_day",
    "tuple_name",
    "validate_rule",
]

WILDCARD = "?_"


class RuleError(Exception):
    pass


class InsecureRule(RuleError):
    def __init__(self, rule_name: str, link: int):
        super().__init__(f"rule {rule_name} is insecure: link {link} has no by/by-anyone guard")
        self.link = link


class UnboundKey(RuleError):
    def __init__(self, vars_: Sequence[str], pattern: FactPattern, link: int):
        super().__init__(f"variables {list(vars_)} are unbound in the key of link {link} ({pattern.name})")
        self.vars = tuple(vars_)
        self.pattern = pattern
        self.link = link


@dataclass(frozen=True)
class FactPattern:
    name: str
    key: Any
    args: tuple = ()

    @property
    def arity(self) -> int:
        return 1 + len(self.args)

    def to_json(self) -> dict:
        return {"fact": self.name, "key": _thaw(self.key), "args": _thaw(self.args)}


@dataclass(frozen=True)
class Guard:
    op: str  # let | for | when | by | by-anyone | by-module
    bindings: tuple = ()  # ((var, expr), ...) for let/for
    expr: Any = None  # predicate for when, set expression for by

    @classmethod
    def from_json(cls, g: Sequence) -> Guard:
        op = g[0]
        if op in ("let", "for"):
            return cls(op, tuple((b[0], freeze(b[1])) for b in g[1]))
        if op in ("when", "by"):
            return cls(op, expr=freeze(g[1]))
        if op in ("by-anyone", "by-module"):
            return cls(op)
        raise RuleError(f"unknown guard {op!r}")

    def to_json(self) -> list:
        if self.op in ("let", "for"):
            return [self.op, [[v, _thaw(e)] for v, e in self.bindings]]
        if self.op in ("when", "by"):
            return [self.op, _thaw(self.expr)]
        return [self.op]

    def expressions(self) -> list:
        if self.op in ("let", "for"):
            return [e for _, e in self.bindings]
        return [] if self.expr is None else [self.expr]


@dataclass(frozen=True)
class Link:
    source: FactPattern
    guards: tuple = ()

    @property
    def checked(self) -> bool:
        return any(g.op in ("by", "by-anyone", "by-module") for g in self.guards)


@dataclass(frozen=True)
class RuleDef:
    rule_name: str
    links: tuple
    output: FactPattern
    kind: str = "rule"
    params: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        if not self.params:
            object.__setattr__(self, "params", _compute_params(self))

    @property
    def ns(self) -> str | None:
        return namespace(self.rule_name)

    @property
    def short_name(self) -> str:
        return self.rule_name.split("/", 1)[-1]

    @classmethod
    def from_json(cls, obj: dict, ns: str | None = None) -> RuleDef:
        """Build from the rule-module JSON form.

        Unqualified fact names refer to rules of the same module, so they are
        qualified with ``ns``.
        """
        def qualify(name: str) -> str:
            return name if "/" in name or ns is None else f"{ns}/{name}"

        name = obj["name"]
        rule_name = qualify(name)
        links = tuple(
            Link(
                FactPattern(qualify(l["fact"]), freeze(l["key"]), freeze(tuple(l.get("args", ())))),
                tuple(Guard.from_json(g) for g in l.get("guards", ())),
            )
            for l in obj["links"]
        )
        out = obj["output"]
        output = FactPattern(
            qualify(out.get("fact", name)), freeze(out["key"]), freeze(tuple(out.get("args", ())))
        )
        return cls(rule_name, links, output, obj.get("kind", "rule"))

    def to_json(self) -> dict:
        """Inverse of ``from_json`` with names left fully qualified."""
        return {
            "name": self.rule_name,
            "kind": self.kind,
            "links": [
                {**l.source.to_json(), "guards": [g.to_json() for g in l.guards]} for l in self.links
            ],
            "output": self.output.to_json(),
        }


def _thaw(v: Any) -> Any:
    if isinstance(v, tuple):
        return [_thaw(x) for x in v]
    return v


def tuple_name(rule: RuleDef, link: int) -> str:
    return f"{rule.rule_name}!{link}"


# -- static analysis -------------------------------------------------------

def _pattern_vars(p: Any) -> list[str]:
    if is_var(p):
        return [] if p == WILDCARD else [p]
    if isinstance(p, (list, tuple)) and p and p[0] == "tuple":
        out: list[str] = []
        for x in p[1:]:
            out.extend(v for v in _pattern_vars(x) if v not in out)
        return out
    return []


def _link_binds(link: Link) -> list[str]:
    out: list[str] = []
    for p in (link.source.key, *link.source.args):
        out.extend(v for v in _pattern_vars(p) if v not in out)
    for g in link.guards:
        for v, _ in g.bindings:
            if v not in out:
                out.append(v)
    return out


def _uses(rule: RuleDef, start: int) -> set[str]:
    """Variables referenced by links ``start``.. and the output."""
    used: set[str] = set()
    for link in rule.links[start:]:
        used.update(variables(link.source.key))
        for a in link.source.args:
            used.update(variables(a))
        for g in link.guards:
            for e in g.expressions():
                used.update(variables(e))
    used.update(variables(rule.output.key))
    for a in rule.output.args:
        used.update(variables(a))
    return used


def _compute_params(rule: RuleDef) -> tuple:
    """For each non-final link, the variables its residual tuple carries."""
    bound: list[str] = []
    params = []
    for i, link in enumerate(rule.links[:-1]):
        bound.extend(v for v in _link_binds(link) if v not in bound)
        later = _uses(rule, i + 1)
        params.append(tuple(v for v in bound if v in later))
    return tuple(params)


def validate_rule(rule: RuleDef) -> RuleDef:
    for i, link in enumerate(rule.links):
        if not link.checked:
            raise InsecureRule(rule.rule_name, i)
    bound: set[str] = set()
    for i, link in enumerate(rule.links):
        if i > 0:
            missing = [v for v in variables(link.source.key) if v not in bound and v != WILDCARD]
            if missing:
                raise UnboundKey(missing, link.source, i)
        for p in (link.source.key, *link.source.args):
            bound.update(_pattern_vars(p))
        for g in link.guards:
            for e in g.expressions():
                free = [v for v in variables(e) if v not in bound]
                if free:
                    raise UnboundVariable(f"{free} in guard of link {i} of {rule.rule_name}")
            bound.update(v for v, _ in g.bindings)
    missing = [v for v in variables(rule.output.key) if v not in bound]
    if missing:
        raise UnboundKey(missing, rule.output, len(rule.links))
    for a in rule.output.args:
        free = [v for v in variables(a) if v not in bound]
        if free:
            raise UnboundVariable(f"{free} in output of {rule.rule_name}")
    if rule.kind == "clause":
        src = rule.links[0].source
        if not src.name.endswith("?") or not rule.output.name.endswith("!"):
            raise RuleError(f"clause {rule.rule_name} must read <pred>? and write <pred>!")
        if src.name[:-1] != rule.output.name[:-1] or src.key != rule.output.key:
            raise RuleError(f"clause {rule.rule_name} must answer on its query key")
    return rule


# -- evaluation ------------------------------------------------------------

def _unify(pattern: Any, value: Any, env: dict) -> bool:
    if is_var(pattern):
        if pattern == WILDCARD:
            return True
        if pattern in env:
            return env[pattern] == value
        env[pattern] = value
        return True
    if isinstance(pattern, (list, tuple)) and pattern and pattern[0] == "tuple":
        parts = pattern[1:]
        if not isinstance(value, (list, tuple)) or len(value) != len(parts):
            return False
        return all(_unify(p, v, env) for p, v in zip(parts, value))
    if isinstance(pattern, (list, tuple)) and pattern and pattern[0] == "quote":
        return pattern[1] == value
    return pattern == value


def by_guard_check(writers: interset.Interset | None, required: Any) -> bool:
    if writers is None:
        return False
    if isinstance(required, (frozenset, set)):
        return interset.subset(writers, frozenset(required))
    if isinstance(required, list):
        required = tuple(required)
    return interset.subset(writers, frozenset([required]))


def _run_guards(guards: Sequence[Guard], env: dict, writers, ns: str | None = None) -> list[dict]:
    envs = [env]
    for g in guards:
        nxt: list[dict] = []
        for e in envs:
            try:
                if g.op == "let":
                    e = dict(e)
                    for v, x in g.bindings:
                        e[v] = evaluate(x, e)
                    nxt.append(e)
                elif g.op == "for":
                    partial = [e]
                    for v, x in g.bindings:
                        partial = [{**p, v: item} for p in partial for item in evaluate(x, p)]
                    nxt.extend(partial)
                elif g.op == "when":
                    if evaluate(g.expr, e):
                        nxt.append(e)
                elif g.op == "by":
                    if by_guard_check(writers, evaluate(g.expr, e)):
                        nxt.append(e)
                elif g.op == "by-module":
                    # written by a rule of the same module
                    if ns is not None and by_guard_check(writers, ns):
                        nxt.append(e)
                else:
                    nxt.append(e)
            except ExprError:
                continue
        envs = nxt
    return envs


def _run_link(rule: RuleDef, i: int, env: dict, key: Any, data: Sequence, writers) -> list[tuple]:
    link = rule.links[i]
    src = link.source
    values = (key, *data)
    if len(values) != src.arity:
        return []
    env = dict(env)
    if not all(_unify(p, v, env) for p, v in zip((src.key, *src.args), values)):
        return []
    out = []
    last = i == len(rule.links) - 1
    for e in _run_guards(link.guards, env, writers, rule.ns):
        try:
            if last:
                k = evaluate(rule.output.key, e)
                d = tuple(evaluate(a, e) for a in rule.output.args)
            else:
                k = evaluate(rule.links[i + 1].source.key, e)
                d = tuple(e[v] for v in rule.params[i])
        except ExprError:
            continue
        out.append((freeze(k), freeze(d)))
    return out


def eval_link0(rule: RuleDef, key: Any, data: Sequence, writers=None) -> list[tuple]:
    """Apply link 0 to a fact; returns ``(key, data)`` pairs.

    The pairs are residual tuples when the rule has more links, output facts
    otherwise.
    """
    return _run_link(rule, 0, {}, key, data, writers)


def eval_continuation(
    rule: RuleDef, link: int, bindings: Sequence, key: Any, data: Sequence, writers=None
) -> list[tuple]:
    env = dict(zip(rule.params[link - 1], bindings))
    return _run_link(rule, link, env, key, data, writers)


def simulate_with(rule: RuleDef, facts: Iterable) -> set[tuple]:
    """Brute-force every join of ``facts`` through ``rule``.

    ``facts`` holds events, or ``(name, key, data)`` triples standing for
    facts with no writers.  Events are accumulated first so retractions count.
    """
    evs = []
    for f in facts:
        if isinstance(f, Event):
            evs.append(f)
        else:
            name, key, data = f
            evs.append(Event("fact", name, key, tuple(data), ts=1, change=1))
    live = [e for e in accumulate_all(evs) if e.kind == "fact"]

    def named(name):
        return [e for e in live if e.name == name]

    frontier = [
        out for f in named(rule.links[0].source.name) for out in eval_link0(rule, f.key, f.data, f.writers)
    ]
    for i in range(1, len(rule.links)):
        facts_i = named(rule.links[i].source.name)
        frontier = [
            out
            for k, bindings in frontier
            for f in facts_i
            if key_json(f.key) == key_json(k)
            for out in eval_continuation(rule, i, bindings, f.key, f.data, f.writers)
        ]
    return set(frontier)
