"""Newline-delimited JSON over TCP.

A client opens with one handshake line ``{"params": {...}, "cookies": {...}}``
and receives the ``init`` event carrying its identity.  After that each
line in either direction is one event.  ``reg`` events subscribe the session
to facts with a given name and key and, unless ``get_existing`` is false,
replay the stored ones first.
"""

from __future__ import annotations

import json
import logging
import queue
import socket
import socketserver
import threading
from typing import Any

from .. import interset
from ..events import FACT, REG, Event, accumulate_all, key_json
from ..gateway import (
    Gateway,
    authenticate,
    event_gateway,
    init_event,
    perm_versions,
    select_version,
    translate_names,
)
from .platform import Platform

log = logging.getLogger(__name__)

PLATFORM_NAMESPACE = "axiom/"


class ProtocolError(ValueError):
    pass


class Session:
    """One client: a gateway, its registrations and an outbound pump."""

    def __init__(self, platform: Platform, send, params: dict, cookies: dict,
                 default_version: str | None = None, default_identity: str | None = None):
        self.platform = platform
        self._send = send
        self.identity = authenticate(params, cookies) or default_identity
        self.version = select_version(params, cookies, default_version)
        found = perm_versions(platform.store.request, self.version) if self.version else None
        self.names = found[0] if found else {}
        self.gateway: Gateway = event_gateway(platform.store.request, self.identity, self.version)
        self._regs: set[tuple[str, str]] = set()
        self._sent: set[str] = set()
        self._lock = threading.Lock()
        self._out: queue.Queue = queue.Queue()
        self._pump = threading.Thread(target=self._run_pump, daemon=True, name="session-pump")
        self._pump.start()
        self._unsubscribe = platform.subscribe(self._on_event)
        self.send(init_event(self.identity).to_dict())

    # -- outbound ----------------------------------------------------------

    def send(self, msg: dict) -> None:
        self._out.put(msg)

    def _run_pump(self) -> None:
        while True:
            msg = self._out.get()
            if msg is None:
                return
            try:
                self._send(msg)
            except OSError:
                return

    def _deliver(self, e: Event) -> None:
        ident = e.identity_key()
        with self._lock:
            if ident in self._sent:
                return
            self._sent.add(ident)
        shown = self.gateway.to_client(e)
        if shown is not None:
            self.send(translate_names(shown, self.names, "to-client").to_dict())

    def _on_event(self, e: Event) -> None:
        if e.kind != FACT:
            return
        with self._lock:
            wanted = (e.name, key_json(e.key)) in self._regs
        if wanted:
            self._deliver(e)

    # -- inbound -----------------------------------------------------------

    def error(self, message: str) -> None:
        self.send({"kind": "error", "message": message})

    def receive(self, msg: Any) -> None:
        if not isinstance(msg, dict) or "kind" not in msg:
            raise ProtocolError("every message must be an event object")
        try:
            e = Event.from_dict(msg)
        except (TypeError, KeyError, ValueError) as exc:
            raise ProtocolError(f"malformed event: {exc}") from None
        if e.kind == FACT:
            self._publish(e)
        elif e.kind == REG:
            self._register(e)

    def _publish(self, e: Event) -> None:
        if e.name is None or e.name.startswith(PLATFORM_NAMESPACE):
            self.error(f"clients cannot publish {e.name!r}")
            return
        if e.writers is None and self.identity is not None:
            e = e.replace(writers=frozenset({self.identity}))
        if e.readers is None:
            e = e.replace(readers=interset.universe)
        e = translate_names(e, self.names, "to-server")
        checked = self.gateway.to_server(e)
        if checked is None:
            self.error(f"event {e.name!r} rejected: writers not satisfied by {self.identity!r}")
            return
        self.platform.publish(checked)

    def _register(self, e: Event) -> None:
        checked = self.gateway.to_server(translate_names(e, self.names, "to-server"))
        if checked is None:
            self.error("reg needs a name and a key")
            return
        with self._lock:
            self._regs.add((checked.name, key_json(checked.key)))
        if checked.get_existing is not False:
            for stored in accumulate_all(self.platform.store.query(FACT, checked.name, checked.key)):
                self._deliver(stored)

    def close(self) -> None:
        self._unsubscribe()
        self._out.put(None)
        self._pump.join(timeout=5.0)


class _Handler(socketserver.StreamRequestHandler):
    server: _TCPServer

    def handle(self) -> None:
        self.connection.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        lock = threading.Lock()

        def send(msg: dict) -> None:
            line = (json.dumps(msg, separators=(",", ":"), ensure_ascii=False) + "\n").encode("utf-8")
            with lock:
                self.wfile.write(line)
                self.wfile.flush()

        session = None
        try:
            first = self.rfile.readline()
            if not first:
                return
            try:
                hello = json.loads(first)
                if not isinstance(hello, dict):
                    raise TypeError("handshake must be an object")
            except (ValueError, TypeError) as exc:
                send({"kind": "error", "message": f"bad handshake: {exc}"})
                return
            session = Session(self.server.platform, send, hello.get("params") or {},
                              hello.get("cookies") or {}, self.server.default_version,
                              self.server.default_identity)
            for line in self.rfile:
                if not line.strip():
                    continue
                try:
                    session.receive(json.loads(line))
                except (ValueError, ProtocolError) as exc:
                    session.error(str(exc))
                    break
        except OSError:
            pass
        finally:
            if session is not None:
                session.close()


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, addr, platform: Platform, default_version: str | None, default_identity: str | None):
        self.platform = platform
        self.default_version = default_version
        self.default_identity = default_identity
        super().__init__(addr, _Handler)


class Server:
    """A platform reachable over TCP."""

    def __init__(self, platform: Platform, host: str = "127.0.0.1", port: int = 0,
                 default_version: str | None = None, default_identity: str | None = None):
        self.platform = platform
        self._tcp = _TCPServer((host, port), platform, default_version, default_identity)
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._tcp.server_address[:2]

    def start(self) -> Server:
        self._thread = threading.Thread(target=self._tcp.serve_forever, daemon=True, name="mip-server")
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._tcp.serve_forever()

    def close(self) -> None:
        self._tcp.shutdown()
        self._tcp.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5.0)

    def __enter__(self) -> Server:  # noqa: PYI034
        return self.start()

    def __exit__(self, *exc) -> None:
        self.close()
