"""Symbolic user sets: unions of intersections of named groups.

A *term* is either an identity (a plain ``str``) or a group, written as a
tuple ``(rule_name, *args)``.  A simple interset is a ``frozenset`` of terms
and stands for the intersection of those terms; the empty frozenset is the
universe.  A canonical interset is a ``tuple`` of simple intersets and stands
for their union; the empty tuple is the empty set.
"""

from __future__ import annotations

import json
from collections.abc import Iterable
from typing import Any

Term = str | tuple
Simple = frozenset
Interset = frozenset | tuple

universe: frozenset = frozenset()
empty_set: tuple = ()


def group(name: str, *args: Any) -> tuple:
    return (name, *args)


def simple(*terms: Term) -> frozenset:
    return frozenset(terms)


def is_canonical(s: Interset) -> bool:
    return isinstance(s, (tuple, list))


def canonical(s: Interset) -> tuple:
    if is_canonical(s):
        return tuple(s)
    return (frozenset(s),)


def uncanonical(s: Interset) -> Interset:
    if is_canonical(s) and len(s) == 1:
        return s[0]
    return s


def _identities(s: frozenset) -> set:
    return {t for t in s if isinstance(t, str)}


def disjoint(a: frozenset, b: frozenset) -> bool:
    ids_a, ids_b = _identities(a), _identities(b)
    return bool(ids_a) and bool(ids_b) and not (ids_a & ids_b)


def _dedup(components: Iterable[frozenset]) -> tuple:
    seen: list[frozenset] = []
    for c in components:
        if c not in seen:
            seen.append(c)
    return tuple(seen)


def intersection(a: Interset, b: Interset) -> Interset:
    if not is_canonical(a) and not is_canonical(b):
        return a | b
    pairs = (x | y for x in canonical(a) for y in canonical(b) if not disjoint(x, y))
    return uncanonical(_dedup(pairs))


def subset(a: Interset, b: Interset) -> bool:
    if is_canonical(a):
        return all(subset(c, b) for c in a)
    if is_canonical(b):
        return any(subset(a, c) for c in b)
    return b <= a


def union(a: Interset, b: Interset) -> tuple:
    left = canonical(a)
    extra = [c for c in canonical(b) if not subset(c, left)]
    return _dedup([*left, *extra])


def contains(s: Interset, term: Term) -> bool:
    """True when every member of ``s`` belongs to the named set ``term``."""
    return subset(s, frozenset([term]))


def enum_groups(s: Interset) -> list:
    out: list = []
    for c in canonical(s):
        out.extend(sorted(c, key=term_sort_key))
    return out


def map_terms(s: Interset, fn) -> Interset:
    if is_canonical(s):
        return tuple(frozenset(fn(t) for t in c) for c in s)
    return frozenset(fn(t) for t in s)


# -- serialization ---------------------------------------------------------

def term_to_json(t: Term) -> dict:
    if isinstance(t, str):
        return {"id": t}
    return {"grp": list(t)}


def term_from_json(obj: Any) -> Term:
    if isinstance(obj, str):
        return obj
    if "id" in obj:
        return obj["id"]
    return tuple(obj["grp"])


def term_sort_key(t: Term) -> str:
    return json.dumps(term_to_json(t), sort_keys=True, separators=(",", ":"))


def _simple_to_json(s: frozenset) -> list:
    return [term_to_json(t) for t in sorted(s, key=term_sort_key)]


def to_json(s: Interset) -> Any:
    """Tagged, order-independent form.

    Simple intersets become a sorted list of terms; canonical ones become
    ``{"union": [...]}`` with sorted components.  A one-component union is
    written as its simple form so equal sets always serialize equally.
    """
    s = uncanonical(s)
    if not is_canonical(s):
        return _simple_to_json(s)
    comps = [_simple_to_json(c) for c in s]
    comps.sort(key=lambda c: json.dumps(c, sort_keys=True, separators=(",", ":")))
    return {"union": comps}


def from_json(obj: Any) -> Interset:
    if isinstance(obj, dict):
        return tuple(frozenset(term_from_json(t) for t in c) for c in obj["union"])
    return frozenset(term_from_json(t) for t in obj)


def dumps(s: Interset) -> str:
    return json.dumps(to_json(s), sort_keys=True, separators=(",", ":"))
