"""A small pure expression language for rule guards and templates.

Expressions are JSON values.  A string starting with ``?`` is a variable,
any other scalar is a literal, and a list ``[op, arg...]`` applies an
operator from a fixed whitelist.  ``["quote", x]`` yields ``x`` unevaluated
(the way to write a literal string that starts with ``?``) and
``["fn", [params...], body]`` builds a lambda for ``map``/``filter``.
"""

from __future__ import annotations

import operator
import re
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass
from functools import reduce
from itertools import pairwise
from typing import Any

from . import interset

DAY_MS = 86_400_000
MAX_DAYS = 20


class ExprError(Exception):
    pass


class UnboundVariable(ExprError):
    pass


class RangeTooWide(ExprError):
    pass


def ts_to_day(ts: int) -> int:
    return ts // DAY_MS


def days_in_range(from_day: int, to_day: int) -> tuple:
    if to_day - from_day > MAX_DAYS:
        raise RangeTooWide(f"range {from_day}..{to_day} spans more than {MAX_DAYS} days")
    return tuple(range(from_day, to_day))


def is_var(x: Any) -> bool:
    return isinstance(x, str) and x.startswith("?")


def _split(text: str, pattern: str) -> tuple:
    parts = re.split(pattern, text)
    while parts and parts[-1] == "":
        parts.pop()
    return tuple(parts)


def _str(*xs) -> str:
    return "".join("" if x is None else str(x) for x in xs)


def _subs(s: str, start: int, end: int | None = None) -> str:
    return s[start:] if end is None else s[start:end]


def _set(*xs) -> frozenset:
    return frozenset(xs)


def _nth(seq, i, default=None):
    try:
        return seq[i]
    except (IndexError, KeyError):
        return default


def _get(coll, k, default=None):
    if isinstance(coll, Mapping):
        return coll.get(k, default)
    return _nth(coll, k, default)


def _contains(coll, x) -> bool:
    if isinstance(coll, (tuple, list)):
        return 0 <= x < len(coll) if isinstance(x, int) else False
    return x in coll


def _chain(*seqs) -> tuple:
    return tuple(x for s in seqs for x in s)


def _eq(*xs) -> bool:
    return all(a == b for a, b in pairwise(xs))


def _cmp(op: Callable) -> Callable:
    return lambda *xs: all(op(a, b) for a, b in pairwise(xs))


def _div(a, b):
    if isinstance(a, int) and isinstance(b, int) and a % b == 0:
        return a // b
    return a / b


OPS: dict[str, Callable] = {
    "+": lambda *xs: sum(xs),
    "-": lambda a, *xs: -a if not xs else reduce(operator.sub, xs, a),
    "*": lambda *xs: reduce(operator.mul, xs, 1),
    "/": _div,
    "quot": lambda a, b: int(a / b),
    "mod": operator.mod,
    "inc": lambda x: x + 1,
    "dec": lambda x: x - 1,
    "min": min,
    "max": max,
    "abs": abs,
    "=": _eq,
    "not=": lambda *xs: not _eq(*xs),
    "<": _cmp(operator.lt),
    "<=": _cmp(operator.le),
    ">": _cmp(operator.gt),
    ">=": _cmp(operator.ge),
    "not": operator.not_,
    "nil?": lambda x: x is None,
    "tuple": lambda *xs: tuple(xs),
    "first": lambda s: _nth(tuple(s), 0),
    "second": lambda s: _nth(tuple(s), 1),
    "last": lambda s: _nth(tuple(s), -1),
    "rest": lambda s: tuple(s)[1:],
    "nth": _nth,
    "get": _get,
    "count": len,
    "empty?": lambda s: len(s) == 0,
    "concat": _chain,
    "range": lambda *xs: tuple(range(*xs)),
    "sort": lambda s: tuple(sorted(s)),
    "distinct": lambda s: tuple(dict.fromkeys(s)),
    "set": _set,
    "to-set": frozenset,
    "contains?": _contains,
    "union": lambda *ss: frozenset().union(*ss),
    "intersection": lambda a, *ss: frozenset(a).intersection(*ss),
    "difference": lambda a, *ss: frozenset(a).difference(*ss),
    "subset?": lambda a, b: frozenset(a) <= frozenset(b),
    "str": _str,
    "subs": _subs,
    "split": _split,
    "join": lambda sep, s: sep.join(str(x) for x in s),
    "lower-case": str.lower,
    "upper-case": str.upper,
    "trim": str.strip,
    "includes?": lambda s, sub: sub in s,
    "starts-with?": lambda s, p: s.startswith(p),
    "ends-with?": lambda s, p: s.endswith(p),
    "re-matches?": lambda pattern, s: re.fullmatch(pattern, s) is not None,
    "map": lambda f, s: tuple(map(f, s)),
    "filter": lambda f, s: tuple(x for x in s if f(x)),
    "every?": lambda f, s: all(f(x) for x in s),
    "some?": lambda f, s: any(f(x) for x in s),
    "ts-to-day": ts_to_day,
    "days-in-range": days_in_range,
    "interset-subset?": interset.subset,
}

SPECIAL_FORMS = frozenset({"quote", "fn", "if", "and", "or"})

# Names accepted as guard heads in rule links; listed so purity checks see
# one vocabulary.
GUARD_FORMS = frozenset({"let", "for", "when", "by", "by-anyone", "by-module"})

WHITELIST = frozenset(OPS) | SPECIAL_FORMS | GUARD_FORMS


@dataclass(frozen=True)
class Lambda:
    params: tuple
    body: Any
    env: Mapping

    def __call__(self, *args):
        if len(args) != len(self.params):
            raise ExprError(f"fn expects {len(self.params)} args, got {len(args)}")
        return evaluate(self.body, {**self.env, **dict(zip(self.params, args))})


def evaluate(expr: Any, env: Mapping[str, Any]) -> Any:
    if isinstance(expr, str):
        if expr.startswith("?"):
            try:
                return env[expr]
            except KeyError:
                raise UnboundVariable(expr) from None
        return expr
    if not isinstance(expr, (list, tuple)):
        return expr
    if not expr:
        return ()
    op, args = expr[0], expr[1:]
    if op == "quote":
        return args[0]
    if op == "fn":
        return Lambda(tuple(args[0]), args[1], dict(env))
    if op == "if":
        test, then, *other = args
        if evaluate(test, env):
            return evaluate(then, env)
        return evaluate(other[0], env) if other else None
    if op == "and":
        result: Any = True
        for a in args:
            result = evaluate(a, env)
            if not result:
                return result
        return result
    if op == "or":
        result = None
        for a in args:
            result = evaluate(a, env)
            if result:
                return result
        return result
    fn = OPS.get(op)
    if fn is None:
        raise ExprError(f"unknown operator {op!r}")
    values = [evaluate(a, env) for a in args]
    try:
        return fn(*values)
    except ExprError:
        raise
    except Exception as exc:
        raise ExprError(f"{op}: {exc}") from exc


def variables(expr: Any) -> list[str]:
    """Free variables of ``expr``, in first-occurrence order."""
    out: list[str] = []

    def walk(x, bound: frozenset):
        if isinstance(x, str):
            if x.startswith("?") and x not in bound and x not in out:
                out.append(x)
            return
        if not isinstance(x, (list, tuple)) or not x:
            return
        if x[0] == "quote":
            return
        if x[0] == "fn":
            walk(x[2], bound | frozenset(x[1]))
            return
        for a in x[1:]:
            walk(a, bound)

    walk(expr, frozenset())
    return out


def operators(expr: Any) -> Iterable[str]:
    """Every operator head used in ``expr``."""
    if not isinstance(expr, (list, tuple)) or not expr:
        return
    head = expr[0]
    if isinstance(head, str):
        yield head
    if head == "quote":
        return
    if head == "fn":
        yield from operators(expr[2])
        return
    for a in expr[1:]:
        yield from operators(a)
