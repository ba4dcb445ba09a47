"""The running platform: store, dispatcher, migrations and subscribers.

Every event enters through ``Platform.publish``.  Stored events are handed
to the dispatcher, to platform services keyed by fact name, to the input
queues of rules still being migrated, and to subscribers (client sessions).
"""

from __future__ import annotations

import logging
import threading
import time
from collections.abc import Callable
from pathlib import Path
from typing import Any

from .. import interset
from ..engine import DEFAULT_DEPTH_CAP, Dispatcher, Topology, TsClock
from ..events import (
    APP_VERSION,
    FACT,
    PERM_VERSIONS,
    PERMS_EXIST,
    RULE_READY,
    Event,
    accumulate_all,
)
from ..migrate import (
    MigrationContext,
    PlanExecutor,
    clause_migrator,
    deploy_dir,
    perm_tracker,
    rule_migrator,
)
from ..permastore import DirBlobs, Hasher, NotFound
from ..store import MemoryStore

log = logging.getLogger(__name__)

Subscriber = Callable[[Event], Any]


class Platform:
    def __init__(
        self,
        store: MemoryStore | None = None,
        hasher: Hasher | None = None,
        shards: int = 3,
        workers: int = 0,
        migration_workers: int = 4,
        depth_cap: int = DEFAULT_DEPTH_CAP,
        window: float = 30.0,
        state_dir: Path | None = None,
        clock: Callable[[], int] | None = None,
    ):
        self.store = store if store is not None else MemoryStore()
        if hasher is None:
            hasher = Hasher(DirBlobs(Path(state_dir) / "blobs")) if state_dir else Hasher()
        self.hasher = hasher
        self.shards = shards
        self.clock = clock or TsClock()
        self.topology = Topology()
        self.dispatcher = Dispatcher(self.store, self.topology, workers, depth_cap, window,
                                     publish=self._publish_product)
        self._lock = threading.RLock()
        self._queues: dict[str, tuple[str, int, str]] = {}
        self._buffers: dict[str, list[Event]] = {}
        self._subscribers: list[Subscriber] = []
        self.ctx = MigrationContext(self.hasher, self.store, self.publish, self.declare)
        state_path = Path(state_dir) / "plans.json" if state_dir else None
        self.executor = PlanExecutor(self.ctx, migration_workers, state_path)
        self.services: dict[str, list[Callable[[Event], Any]]] = {
            PERM_VERSIONS: [self._track_perms],
            PERMS_EXIST: [self._migrate_rules, self._migrate_clauses],
            RULE_READY: [self._rule_ready],
            APP_VERSION: [self._push],
        }
        self._restore()

    # -- publishing ------------------------------------------------------

    def publish(self, e: Event, depth: int = 0) -> bool:
        """Store ``e`` and route it; False if it was already stored."""
        if e.ts is None:
            e = e.replace(ts=self.clock())
        if e.change is None:
            e = e.replace(change=1)
        if not self.store.put(e):
            return False
        self._route(e, depth)
        return True

    def _publish_product(self, e: Event, depth: int) -> None:
        self.publish(e, depth)

    def _route(self, e: Event, depth: int) -> None:
        with self._lock:
            if e.kind == FACT:
                for q, (rule_name, _, name) in self._queues.items():
                    if name == e.name and rule_name not in self.topology:
                        self._buffers[q].append(e)
            subscribers = list(self._subscribers)
        self.dispatcher.submit(e, depth)
        if e.kind == FACT:
            for service in self.services.get(e.name, ()):
                try:
                    service(e)
                except Exception as exc:  # noqa: BLE001 - a failing service must not stop routing
                    log.error("service for %s failed on %r: %s", e.name, e.key, exc)
        for s in subscribers:
            s(e)

    def subscribe(self, fn: Subscriber) -> Callable[[], None]:
        with self._lock:
            self._subscribers.append(fn)

        def unsubscribe():
            with self._lock:
                if fn in self._subscribers:
                    self._subscribers.remove(fn)

        return unsubscribe

    def query(self, kind: str, name: str, key: Any) -> list[Event]:
        return accumulate_all(self.store.query(kind, name, key))

    # -- rules -----------------------------------------------------------

    def declare(self, queue: str, binding: dict) -> None:
        rule_name, _, link = queue.removeprefix("fact-for-rule/").rpartition("!")
        with self._lock:
            if queue not in self._queues and rule_name not in self.topology:
                self._queues[queue] = (rule_name, int(link), binding["name"])
                self._buffers[queue] = []

    def activate(self, rule_name: str) -> bool:
        """Attach ``rule_name`` to live traffic and drain its input queues."""
        rule = self.hasher.eval_symbol(rule_name)
        with self._lock:
            if rule_name in self.topology:
                return False
            self.topology.add(rule)
            drained = []
            for q, (owner, link, _) in list(self._queues.items()):
                if owner == rule_name:
                    drained.append((link, self._buffers.pop(q)))
                    del self._queues[q]
        for link, events in sorted(drained, key=lambda d: d[0]):
            for e in events:
                self.dispatcher.submit(e, 0, only=(rule_name, link))
        return True

    @property
    def active_rules(self) -> list[str]:
        with self._lock:
            return sorted(self.topology.rules)

    def _restore(self) -> None:
        for e in accumulate_all(self.store.query(FACT, RULE_READY, 0)):
            try:
                self.activate(e.data[0])
            except NotFound:
                log.error("cannot restore rule %s: definition missing", e.data[0])
        for plan in self.executor.pending_plans():
            self.executor.submit(plan, resume=False)

    # -- platform services -----------------------------------------------

    def _track_perms(self, e: Event) -> None:
        perm_tracker(e, self.store.counter_add, self.publish)

    def _migrate_rules(self, e: Event) -> None:
        rule_migrator(e, self.ctx, self.shards, self.executor.submit)

    def _migrate_clauses(self, e: Event) -> None:
        clause_migrator(e, self.ctx)

    def _rule_ready(self, e: Event) -> None:
        if e.change and e.change > 0:
            self.activate(e.data[0])

    def _push(self, e: Event) -> None:
        if e.change and e.change > 0:
            self.deploy(e.data[0], e.key, e.writers)

    def deploy(self, version: str, root, writers: Any = interset.universe) -> Event:
        return deploy_dir(self.hasher, version, root, self.publish, writers)

    # -- lifecycle -------------------------------------------------------

    def wait_idle(self, timeout: float = 60.0) -> bool:
        """Wait until migrations and dispatching have both settled."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            self.executor.wait(max(0.0, deadline - time.monotonic()))
            self.dispatcher.wait_idle(max(0.0, deadline - time.monotonic()))
            if not self.executor.busy() and self.dispatcher.wait_idle(0):
                return True
        return False

    def close(self) -> None:
        self.wait_idle(10.0)
        self.dispatcher.close()
        self.store.close()
