"""Client side of the wire protocol, plus connection middleware.

A connection is anything with ``pub(msg)`` and ``sub(name, callback)``;
messages are plain event dicts.  The ``wrap_*`` functions each return a new
connection with one behaviour added.
"""

from __future__ import annotations

import json
import socket
import threading
import time as _time
import uuid as _uuid
from collections import Counter, defaultdict
from collections.abc import Callable
from dataclasses import dataclass, field, replace
from typing import Any

from ..events import Event, canonical_json

Callback = Callable[[Any], Any]


class PubSub:
    """Synchronous publish/subscribe keyed by ``dispatch(message)``."""

    def __init__(self, dispatch: Callable[[Any], Any]):
        self.dispatch = dispatch
        self._subs: dict[Any, list[Callback]] = defaultdict(list)
        self._lock = threading.Lock()

    def sub(self, value: Any, fn: Callback) -> None:
        with self._lock:
            self._subs[value].append(fn)

    def pub(self, msg: Any) -> None:
        value = self.dispatch(msg)
        with self._lock:
            subs = list(self._subs.get(value, ()))
        for fn in subs:
            fn(msg)


def pubsub(dispatch: Callable[[Any], Any]) -> PubSub:
    return PubSub(dispatch)


def by_name(msg: dict) -> Any:
    return msg.get("name")


@dataclass
class Host:
    pub: Callable[[dict], Any] | None = None
    sub: Callable[[str, Callback], Any] | None = None
    time: Callable[[], int] = field(default=lambda: int(_time.time() * 1000))
    uuid: Callable[[], str] = field(default=lambda: str(_uuid.uuid4()))
    connection: Any = None


def _without_sets(msg: dict) -> str:
    return canonical_json({k: v for k, v in msg.items() if k not in ("readers", "writers")})


def wrap_feed_forward(host: Host) -> Host:
    """Deliver the client's own facts locally right away.

    The server's echo of such a fact, compared without readers and writers,
    is then swallowed once.
    """
    local = pubsub(by_name)
    pending: Counter = Counter()
    lock = threading.Lock()

    def from_server(msg):
        k = _without_sets(msg)
        with lock:
            if pending[k] > 0:
                pending[k] -= 1
                return
        local.pub(msg)

    hooked: set = set()

    def sub(name, fn):
        local.sub(name, fn)
        if name not in hooked:
            hooked.add(name)
            host.sub(name, from_server)

    def pub(msg):
        if msg.get("kind") == "fact":
            with lock:
                pending[_without_sets(msg)] += 1
            local.pub(msg)
        host.pub(msg)

    return replace(host, pub=pub, sub=sub)


def wrap_atomic_updates(host: Host) -> Host:
    """Present an atomic update as a removal followed by an addition."""

    def sub(name, fn):
        def split(msg):
            if msg.get("removed") is None:
                fn(msg)
                return
            rest = {k: v for k, v in msg.items() if k != "removed"}
            fn({**rest, "data": msg["removed"], "change": -msg.get("change", 1)})
            fn(rest)

        host.sub(name, split)

    return replace(host, sub=sub)


def wrap_reg(host: Host) -> Host:
    """Send each distinct registration to the server only once."""
    seen: set = set()
    lock = threading.Lock()

    def pub(msg):
        if msg.get("kind") == "reg":
            k = (msg.get("name"), canonical_json(msg.get("key")))
            with lock:
                if k in seen:
                    return
                seen.add(k)
        host.pub(msg)

    return replace(host, pub=pub)


def wrap_late_subs(host: Host) -> Host:
    """Replay earlier messages on a name to subscribers that come late."""
    history: dict[str, list] = defaultdict(list)
    callbacks: dict[str, list] = defaultdict(list)
    lock = threading.Lock()

    def sub(name, fn):
        with lock:
            first = name not in callbacks
            past = list(history[name])
            callbacks[name].append(fn)
        for msg in past:
            fn(msg)
        if first:
            def record(msg):
                with lock:
                    history[name].append(msg)
                    fns = list(callbacks[name])
                for f in fns:
                    f(msg)

            host.sub(name, record)

    return replace(host, sub=sub)


class Connection:
    """A TCP session with a server."""

    def __init__(self, host: str, port: int, params: dict | None = None, cookies: dict | None = None,
                 timeout: float = 10.0):
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._sock.settimeout(None)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._rfile = self._sock.makefile("rb")
        self._wlock = threading.Lock()
        self._ps = pubsub(by_name)
        self.identity: str | None = None
        self.status = "ok"
        self.errors: list[str] = []
        self._ready = threading.Event()
        self._closed = threading.Event()
        self._write({"params": params or {}, "cookies": cookies or {}})
        self._reader = threading.Thread(target=self._read, daemon=True, name="mip-client")
        self._reader.start()
        if not self._ready.wait(timeout):
            self.close()
            raise TimeoutError("no init event from server")

    def _write(self, msg: dict) -> None:
        line = (json.dumps(msg, separators=(",", ":"), ensure_ascii=False) + "\n").encode("utf-8")
        with self._wlock:
            self._sock.sendall(line)

    def _read(self) -> None:
        try:
            for line in self._rfile:
                msg = json.loads(line)
                kind = msg.get("kind")
                if kind == "init":
                    self.identity = msg.get("identity")
                    self._ready.set()
                elif kind == "error":
                    self.errors.append(msg.get("message", ""))
                else:
                    self._ps.pub(msg)
        except (OSError, ValueError):
            pass
        finally:
            self.status = "err"
            self._ready.set()
            self._closed.set()

    def pub(self, msg: dict | Event) -> None:
        if isinstance(msg, Event):
            msg = msg.to_dict()
        self._write(msg)

    def sub(self, name: str, fn: Callback) -> None:
        self._ps.sub(name, fn)

    def host(self) -> Host:
        return Host(pub=self.pub, sub=self.sub, connection=self)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()
        self._closed.wait(5.0)

    def __enter__(self) -> Connection:  # noqa: PYI034
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def default_connection(host: str, port: int, **kw) -> Host:
    """A connection wrapped the way views and queries expect."""
    return wrap_late_subs(wrap_reg(wrap_atomic_updates(wrap_feed_forward(Connection(host, port, **kw).host()))))
