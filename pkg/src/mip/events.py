"""Event values, atomic updates and accumulation."""

from __future__ import annotations

import json
from collections.abc import Iterable
from dataclasses import dataclass, fields, replace
from typing import Any

from . import interset

FACT, RULE, REG, INIT = "fact", "rule", "reg", "init"
KINDS = (FACT, RULE, REG, INIT)

# Platform fact names.
PERM_VERSIONS = "axiom/perm-versions"
PERMS_EXIST = "axiom/perms-exist"
RULE_READY = "axiom/rule-ready"
CLIENT_INFO = "axiom/client-info"
APP_VERSION = "axiom/app-version"


def freeze(value: Any) -> Any:
    """Turn JSON-ish lists into tuples, recursively."""
    if isinstance(value, list):
        return tuple(freeze(v) for v in value)
    if isinstance(value, tuple):
        return tuple(freeze(v) for v in value)
    if isinstance(value, dict):
        return {k: freeze(v) for k, v in value.items()}
    return value


def _thaw(value: Any) -> Any:
    if isinstance(value, (tuple, list)):
        return [_thaw(v) for v in value]
    if isinstance(value, (set, frozenset)):
        return sorted(_thaw(v) for v in value)
    if isinstance(value, dict):
        return {str(k): _thaw(v) for k, v in value.items()}
    return value


@dataclass(frozen=True, eq=False)
class Event:
    kind: str
    name: str
    key: Any = None
    data: tuple | None = None
    ts: int | None = None
    change: int | None = None
    writers: interset.Interset | None = None
    readers: interset.Interset | None = None
    removed: tuple | None = None
    identity: str | None = None
    get_existing: bool | None = None

    def __post_init__(self):
        for f in ("key", "data", "removed"):
            v = getattr(self, f)
            if isinstance(v, (list, tuple)):
                object.__setattr__(self, f, freeze(v))

    def __hash__(self) -> int:
        return hash(self.identity_key())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Event):
            return NotImplemented
        return self.identity_key() == other.identity_key()

    def replace(self, **changes) -> Event:
        return replace(self, **changes)

    def to_dict(self) -> dict:
        out: dict = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if f.name in ("writers", "readers"):
                out[f.name] = interset.to_json(v)
            else:
                out[f.name] = _thaw(v)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> Event:
        kw = {k: v for k, v in obj.items() if k in _FIELD_NAMES}
        for f in ("writers", "readers"):
            if kw.get(f) is not None:
                kw[f] = interset.from_json(kw[f])
        return cls(**kw)

    def dumps(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> Event:
        return cls.from_dict(json.loads(text))

    def identity_key(self) -> str:
        """Canonical serialization; events are equal iff these are."""
        cached = self.__dict__.get("_ident")
        if cached is None:
            cached = self.dumps()
            object.__setattr__(self, "_ident", cached)
        return cached


_FIELD_NAMES = {f.name for f in fields(Event)}


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def key_json(key: Any) -> str:
    return canonical_json(_thaw(key))


def namespace(name: str) -> str | None:
    if "/" not in name:
        return None
    return name.split("/", 1)[0]


# -- atomic updates --------------------------------------------------------

def split_atomic_update(e: Event) -> list[Event]:
    if e.removed is None:
        return [e]
    return [
        e.replace(removed=None),
        e.replace(removed=None, data=e.removed, change=-e.change),
    ]


def matching(a: Event, b: Event) -> bool:
    if a.change is None or b.change is None or a.change != -b.change:
        return False
    return a.replace(data=None, change=None) == b.replace(data=None, change=None)


def find_atomic_update(e: Event, coll: Iterable[Event]) -> tuple[Event | None, list[Event]]:
    coll = list(coll)
    for i, other in enumerate(coll):
        if matching(e, other):
            return other, coll[:i] + coll[i + 1:]
    return None, coll


def join_atomic_updates(coll: Iterable[Event]) -> list[Event]:
    pending = list(coll)
    out: list[Event] = []
    while pending:
        head, pending = pending[0], pending[1:]
        match, pending = find_atomic_update(head, pending)
        if match is None:
            out.append(head)
            continue
        pos, neg = (head, match) if head.change > 0 else (match, head)
        out.append(pos.replace(removed=neg.data))
    return out


# -- accumulation ----------------------------------------------------------

def base_of(e: Event) -> Event:
    return e.replace(change=None, ts=None)


def accumulate(state: dict | None = None, e: Event | None = None) -> dict:
    """Fold ``e`` into ``state`` (a map from base event to (total, latest_ts)).

    Returns a new map; ``accumulate()`` alone gives the empty map.
    """
    out = dict(state or {})
    if e is not None:
        accumulate_into(out, e)
    return out


def accumulate_into(state: dict, e: Event) -> dict:
    for part in split_atomic_update(e):
        b = base_of(part)
        total, latest = state.get(b, (0, None))
        ts = part.ts if latest is None else max(latest, part.ts or 0)
        state[b] = (total + part.change, ts)
    return state


def accumulated_events(state: dict, signed: bool = False) -> list[Event]:
    """Live events of ``state``; ``signed`` also keeps negative totals.

    A retraction can arrive before the fact it retracts, so joins must see
    the negative total to cancel correctly once the fact shows up.
    """
    return [b.replace(change=total, ts=ts) for b, (total, ts) in state.items()
            if total != 0 and (signed or total > 0)]


def accumulate_all(events: Iterable[Event]) -> list[Event]:
    state: dict = {}
    for e in events:
        accumulate_into(state, e)
    return accumulated_events(state)
