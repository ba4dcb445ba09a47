"""The trust boundary between clients and the platform.

Membership in a named group is decided from derived facts: a group term
``(rule, *args)`` holds for user ``u`` iff the accumulated ``rule`` facts
keyed by ``u`` include one whose data equals ``args``.  Only facts the rule
itself wrote, and which ``u`` may read without any group lookup, count.
"""

from __future__ import annotations

import mimetypes
import threading
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field
from typing import Any

from . import interset
from .events import (
    CLIENT_INFO,
    FACT,
    INIT,
    PERM_VERSIONS,
    REG,
    RULE,
    Event,
    accumulate_all,
    namespace,
)
from .rules import by_guard_check

Endpoint = Callable[[dict], Iterable[Event]]

IDENTITY_PARAM, IDENTITY_COOKIE = "_identity", "user_identity"
VERSION_PARAM, VERSION_COOKIE = "_ver", "app-version"


class NotFound(LookupError):
    pass


class NoSuchVersion(NotFound):
    def __init__(self, version: str):
        super().__init__(f"No Such Version: {version}")
        self.version = version


class NoSuchPath(NotFound):
    def __init__(self, path: str):
        super().__init__(f"Not Found: {path}")
        self.path = path


def _live(endpoint: Endpoint, name: str, key: Any) -> list[Event]:
    return accumulate_all(endpoint({"kind": FACT, "name": name, "key": key}))


def _is_universe(s: interset.Interset | None) -> bool:
    return s is None or s == interset.universe


# -- identity --------------------------------------------------------------

def readable_without_groups(user: str, readers: interset.Interset | None) -> bool:
    """``user`` is in ``readers`` by identity terms alone."""
    if readers is None:
        return True
    return any(
        all(isinstance(t, str) and t == user for t in comp) for comp in interset.canonical(readers)
    )


class IdentityPredicate:
    """Membership test for one user; group lookups are cached per rule name."""

    def __init__(self, endpoint: Endpoint, user: str | None):
        self.endpoint = endpoint
        self.user = user
        self._groups: dict[str, set[tuple]] = {}
        self._lock = threading.Lock()

    def _load(self, rule_name: str) -> set[tuple]:
        with self._lock:
            cached = self._groups.get(rule_name)
        if cached is not None:
            return cached
        ns = namespace(rule_name)
        members = set()
        for e in _live(self.endpoint, rule_name, self.user):
            if ns is None or not by_guard_check(e.writers, ns):
                continue
            if not readable_without_groups(self.user, e.readers):
                continue
            members.add(tuple(e.data or ()))
        with self._lock:
            self._groups.setdefault(rule_name, members)
        return members

    def holds(self, term: interset.Term) -> bool:
        if isinstance(term, str):
            return term == self.user
        name, *args = term
        return tuple(args) in self._load(name)

    def __call__(self, s: interset.Interset | None) -> bool:
        if self.user is None:
            return False
        if s is None:
            s = interset.universe
        for term in interset.enum_groups(s):
            if not isinstance(term, str):
                self._load(term[0])
        return any(all(self.holds(t) for t in comp) for comp in interset.canonical(s))


def identity_pred(endpoint: Endpoint, user: str | None) -> IdentityPredicate:
    return IdentityPredicate(endpoint, user)


# -- versions --------------------------------------------------------------

def perm_versions(endpoint: Endpoint, version: str) -> tuple[dict, dict] | None:
    """The live ``[code-map, static-map]`` of ``version``, newest first."""
    live = _live(endpoint, PERM_VERSIONS, version)
    if not live:
        return None
    latest = max(live, key=lambda e: e.ts or 0)
    code_map, static_map = latest.data
    return dict(code_map), dict(static_map)


class RuleVersionVerifier:
    """Does a writers set name a module of the given app version?"""

    def __init__(self, endpoint: Endpoint):
        self.endpoint = endpoint
        self._hashes: dict[str, frozenset] = {}
        self._lock = threading.Lock()

    def hashes(self, version: str) -> frozenset:
        with self._lock:
            cached = self._hashes.get(version)
        if cached is not None:
            return cached
        found = perm_versions(self.endpoint, version)
        if found is None:
            return frozenset()
        hashes = frozenset(str(v) for v in found[0].values())
        with self._lock:
            self._hashes[version] = hashes
        return hashes

    def __call__(self, version: str | None, writers: interset.Interset | None) -> bool:
        if version is None or writers is None:
            return False
        hashes = self.hashes(version)
        comps = interset.canonical(writers)
        return bool(comps) and all(any(isinstance(t, str) and t in hashes for t in c) for c in comps)


def rule_version_verifier(endpoint: Endpoint) -> RuleVersionVerifier:
    return RuleVersionVerifier(endpoint)


# -- names -----------------------------------------------------------------

def _translate_name(name: str, table: Mapping[str, str]) -> str:
    ns, sep, rest = name.partition("/")
    if sep and ns in table:
        return f"{table[ns]}/{rest}"
    return name


def _translate_set(s: interset.Interset | None, table: Mapping[str, str]):
    if s is None:
        return None

    def term(t):
        if isinstance(t, str):
            return t
        return (_translate_name(t[0], table), *t[1:])

    return interset.map_terms(s, term)


def translate_names(e: Event, table: Mapping[str, str], direction: str = "to-server") -> Event:
    """Rename module namespaces in ``e``'s name and group terms.

    ``table`` maps module names to refs; ``to-client`` applies it inverted.
    """
    if direction == "to-client":
        table = {v: k for k, v in table.items()}
    elif direction != "to-server":
        raise ValueError(f"unknown direction {direction!r}")
    table = {str(k): str(v) for k, v in table.items()}
    changes: dict[str, Any] = {}
    if e.name is not None:
        changes["name"] = _translate_name(e.name, table)
    for f in ("writers", "readers"):
        if getattr(e, f) is not None:
            changes[f] = _translate_set(getattr(e, f), table)
    return e.replace(**changes)


# -- request metadata --------------------------------------------------------

def _cookie(cookies: Mapping, name: str) -> str | None:
    value = cookies.get(name)
    if isinstance(value, Mapping):
        value = value.get("value")
    return value


def authenticate(params: Mapping = {}, cookies: Mapping = {}) -> str | None:
    """Trusting authenticator: the identity parameter, else the cookie."""
    return params.get(IDENTITY_PARAM) or _cookie(cookies, IDENTITY_COOKIE)


def select_version(params: Mapping = {}, cookies: Mapping = {}, default: str | None = None) -> str | None:
    return params.get(VERSION_PARAM) or _cookie(cookies, VERSION_COOKIE) or default


def init_event(identity: str | None) -> Event:
    return Event(INIT, CLIENT_INFO, identity=identity)


def static_content(endpoint: Endpoint, unhash: Callable[[str], bytes], version: str, path: str) -> tuple[bytes, str]:
    """Bytes and content type of a static file of ``version``."""
    found = perm_versions(endpoint, version)
    if found is None:
        raise NoSuchVersion(version)
    ref = found[1].get(path)
    if ref is None:
        raise NoSuchPath(path)
    content_type = mimetypes.guess_type(path)[0] or "application/octet-stream"
    return unhash(ref), content_type


# -- filtering ---------------------------------------------------------------

@dataclass
class Gateway:
    """Bidirectional event filter for one session."""

    identity: str | None
    app_version: str | None
    pred: Callable[[Any], bool]
    verifier: Callable[[str | None, Any], bool] = field(default=lambda ver, writers: False)

    def _readable(self, readers) -> bool:
        return _is_universe(readers) or self.pred(readers)

    def to_client(self, e: Event) -> Event | None:
        if e.kind == RULE:
            return None
        if e.kind != FACT:
            return e
        w = e.writers
        ns = namespace(e.name or "")
        integrity = w is not None and (
            self.pred(w)
            or self.verifier(self.app_version, w)
            or (ns is not None and interset.subset(w, frozenset({ns})))
        )
        if not integrity or not self._readable(e.readers):
            return None
        return e

    def to_server(self, e: Event) -> Event | None:
        if e.kind == FACT:
            if e.writers is None or not self.pred(e.writers):
                return None
            if not self._readable(e.readers):
                e = e.replace(readers=interset.union(e.readers, frozenset({self.identity})))
            return e
        if e.kind == REG:
            return e if e.name is not None and e.key is not None else None
        if e.kind == RULE:
            return None
        return e


def event_gateway(endpoint: Endpoint, identity: str | None, app_version: str | None) -> Gateway:
    return Gateway(identity, app_version, identity_pred(endpoint, identity), rule_version_verifier(endpoint))
