"""Event processors (emitter, multiplier, matcher) and the dispatcher."""

from __future__ import annotations

import logging
import queue
import threading
import time
import zlib
from collections import deque
from collections.abc import Callable, Iterable
from dataclasses import dataclass
from typing import Any

from . import interset
from .events import (
    FACT,
    RULE,
    Event,
    accumulate_into,
    accumulated_events,
    join_atomic_updates,
    key_json,
    split_atomic_update,
)
from .rules import RuleDef, eval_continuation, eval_link0, tuple_name

log = logging.getLogger(__name__)

TS_MODULUS = 1 << 48
DEFAULT_DEPTH_CAP = 32

Endpoint = Callable[[dict], Iterable[Event]]


class MatchTimeout(Exception):
    pass


class DepthExceeded(Exception):
    pass


def product_ts(ts_rule: int, ts_fact: int) -> int:
    return (ts_rule * ts_fact) % TS_MODULUS


class TsClock:
    """Unique, increasing millisecond timestamps."""

    def __init__(self, now: Callable[[], float] = time.time):
        self._now = now
        self._last = 0
        self._lock = threading.Lock()

    def __call__(self) -> int:
        with self._lock:
            self._last = max(int(self._now() * 1000), self._last + 1)
            return self._last


_rule_clock = TsClock()


def initial_rule_event(rule: RuleDef, clock: Callable[[], int] = _rule_clock) -> Event:
    return Event(
        RULE,
        rule.rule_name,
        key=0,
        data=(),
        ts=clock(),
        change=1,
        writers=frozenset({rule.ns}),
        readers=interset.universe,
    )


def _output_name(rule: RuleDef, link: int) -> tuple[str, str]:
    if link == len(rule.links) - 1:
        return FACT, rule.output.name
    return RULE, tuple_name(rule, link)


@dataclass(frozen=True)
class Emitter:
    rule: RuleDef

    def __call__(self, e: Event) -> list[Event]:
        kind, name = _output_name(self.rule, 0)
        writers = frozenset({self.rule.ns})
        out = []
        for part in split_atomic_update(e):
            for key, data in eval_link0(self.rule, part.key, part.data, part.writers):
                out.append(
                    Event(kind, name, key, data, ts=part.ts, change=part.change,
                          writers=writers, readers=part.readers)
                )
        return out


def _meet(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return interset.intersection(a, b)


@dataclass(frozen=True)
class Multiplier:
    rule: RuleDef
    link: int

    def __post_init__(self):
        if not 1 <= self.link < len(self.rule.links):
            raise ValueError(f"link {self.link} out of range for {self.rule.rule_name}")

    @property
    def rule_input(self) -> str:
        return tuple_name(self.rule, self.link - 1)

    @property
    def fact_input(self) -> str:
        return self.rule.links[self.link].source.name

    def __call__(self, rule_ev: Event, fact_ev: Event) -> list[Event]:
        kind, name = _output_name(self.rule, self.link)
        out = []
        for r in split_atomic_update(rule_ev):
            for f in split_atomic_update(fact_ev):
                for key, data in eval_continuation(self.rule, self.link, r.data, f.key, f.data, f.writers):
                    out.append(
                        Event(kind, name, key, data,
                              ts=product_ts(r.ts, f.ts),
                              change=r.change * f.change,
                              writers=r.writers,
                              readers=_meet(r.readers, f.readers))
                    )
        return join_atomic_updates(out)


class ReplyChannel:
    """A reply stream: events then one end mark, read with a timeout."""

    _END = object()

    def __init__(self, timeout: float | None = 1.0):
        self._q: queue.Queue = queue.Queue()
        self.timeout = timeout

    def put(self, e: Event) -> None:
        self._q.put(e)

    def close(self) -> None:
        self._q.put(self._END)

    def __iter__(self):
        while True:
            try:
                item = self._q.get(timeout=self.timeout)
            except queue.Empty:
                raise MatchTimeout("no reply from store within timeout") from None
            if item is self._END:
                return
            yield item


def accumulate_query(endpoint: Endpoint) -> Endpoint:
    def accumulated(req: dict) -> list[Event]:
        state: dict = {}
        for e in endpoint(req):
            accumulate_into(state, e)
        return accumulated_events(state)

    return accumulated


@dataclass
class Matcher:
    """Joins one event with every stored counterpart for a rule link.

    Counterparts are accumulated first, so cancelled pairs contribute
    nothing, while a net retraction still joins with its negative count.
    Products are produced newest counterpart first.
    """

    rule: RuleDef
    link: int
    endpoint: Endpoint

    def __post_init__(self):
        self.mult = Multiplier(self.rule, self.link)

    def request_for(self, e: Event) -> dict:
        if e.kind == FACT:
            return {"kind": RULE, "name": self.mult.rule_input, "key": e.key}
        return {"kind": FACT, "name": self.mult.fact_input, "key": e.key}

    def __call__(self, e: Event, out: Callable[[Event | None], Any] | None = None,
                 before: int | None = None) -> list[Event]:
        req = self.request_for(e)
        if before is not None:
            req["before"] = before
        state: dict = {}
        for reply in self.endpoint(req):
            accumulate_into(state, reply)
        products = []
        for other in reversed(accumulated_events(state, signed=True)):
            pair = (e, other) if e.kind == RULE else (other, e)
            for p in self.mult(*pair):
                products.append(p)
                if out is not None:
                    out(p)
        if out is not None:
            out(None)
        return products


# -- topology and dispatch -------------------------------------------------

class Topology:
    """Registered rules, indexed by the event names they consume."""

    def __init__(self, rules: Iterable[RuleDef] = ()):
        self.rules: dict[str, RuleDef] = {}
        for r in rules:
            self.add(r)

    def add(self, rule: RuleDef) -> None:
        self.rules[rule.rule_name] = rule

    def remove(self, rule_name: str) -> None:
        self.rules.pop(rule_name, None)

    def __contains__(self, rule_name: str) -> bool:
        return rule_name in self.rules

    def consumers(self, e: Event) -> list[tuple[RuleDef, int]]:
        """(rule, link) pairs that take ``e`` as input."""
        out = []
        for r in list(self.rules.values()):
            for i, link in enumerate(r.links):
                if e.kind == FACT and link.source.name == e.name or e.kind == RULE and i >= 1 and tuple_name(r, i - 1) == e.name:
                    out.append((r, i))
        return out


class RecentWindow:
    """Recently dispatched events per (kind, name, key), kept for ``span`` s.

    Merged into matcher replies so a lagging store cannot hide a counterpart
    that was just processed.
    """

    def __init__(self, span: float = 30.0, clock: Callable[[], float] = time.monotonic):
        self.span = span
        self._clock = clock
        self._lock = threading.Lock()
        self._events: dict[tuple, deque] = {}
        self._adds = 0

    def add(self, e: Event) -> None:
        slot = (e.kind, e.name, key_json(e.key))
        now = self._clock()
        with self._lock:
            self._events.setdefault(slot, deque()).append((now, e))
            self._adds += 1
            if self._adds % 1024 == 0:
                self._sweep(now - self.span)

    def _sweep(self, horizon: float) -> None:
        for slot in list(self._events):
            q = self._events[slot]
            while q and q[0][0] < horizon:
                q.popleft()
            if not q:
                del self._events[slot]

    def get(self, kind: str, name: str, key: Any) -> list[Event]:
        slot = (kind, name, key_json(key))
        horizon = self._clock() - self.span
        with self._lock:
            q = self._events.get(slot)
            if not q:
                return []
            while q and q[0][0] < horizon:
                q.popleft()
            if not q:
                del self._events[slot]
            return [e for _, e in q]

    def merged(self, endpoint: Endpoint, seq_of: Callable[[Event], int | None] | None = None) -> Endpoint:
        def query(req: dict) -> list[Event]:
            stored = list(endpoint(req))
            seen = {e.identity_key() for e in stored}
            extra = [e for e in self.get(req["kind"], req["name"], req["key"]) if e.identity_key() not in seen]
            before = req.get("before")
            if before is not None and seq_of is not None:
                extra = [e for e in extra if (seq_of(e) or before) < before]
            return stored + extra

        return query


@dataclass
class Fault:
    event: Event
    error: BaseException


@dataclass
class _Item:
    event: Event
    depth: int
    only: tuple[str, int] | None = None


class Dispatcher:
    """Routes events to rule processors and feeds products back.

    Events are partitioned by key over ``workers`` serial executors, so all
    events sharing a key are processed in order by one thread.  A join pair
    (rule tuple, fact) always shares its key.  Each event is matched only
    against counterparts stored before it, so every pair is joined exactly
    once, by whichever of the two was stored later, whatever the processing
    order.  With ``workers=0`` processing runs inline on the caller's thread.

    ``publish(event, depth)`` is called for every product; it must store the
    product and hand it back through ``submit``.  The default does exactly
    that.
    """

    def __init__(
        self,
        store,
        topology: Topology | None = None,
        workers: int = 0,
        depth_cap: int = DEFAULT_DEPTH_CAP,
        window: float = 30.0,
        publish: Callable[[Event, int], Any] | None = None,
    ):
        self.store = store
        self.topology = topology or Topology()
        self.depth_cap = depth_cap
        self.window = RecentWindow(window)
        self._seq_of = getattr(store, "seq_of", None)
        self.endpoint = self.window.merged(store.request, self._seq_of)
        self.publish = publish or self._store_and_submit
        self.faults: list[Fault] = []
        self._local = threading.local()
        self._pending = 0
        self._idle = threading.Condition()
        self._queues = [queue.Queue() for _ in range(workers)]
        self._threads = [
            threading.Thread(target=self._worker, args=(q,), daemon=True, name=f"dispatch-{i}")
            for i, q in enumerate(self._queues)
        ]
        for t in self._threads:
            t.start()

    def _store_and_submit(self, e: Event, depth: int) -> None:
        if self.store.put(e):
            self.submit(e, depth)

    # -- submission ----------------------------------------------------

    def submit(self, e: Event, depth: int = 0, only: tuple[str, int] | None = None) -> None:
        """Process ``e`` (already stored) against the registered rules."""
        item = _Item(e, depth, only)
        self.window.add(e)
        with self._idle:
            self._pending += 1
        if self._queues:
            idx = zlib.crc32(key_json(e.key).encode("utf-8")) % len(self._queues)
            self._queues[idx].put(item)
            return
        backlog = getattr(self._local, "backlog", None)
        if backlog is not None:
            backlog.append(item)
            return
        self._local.backlog = backlog = deque([item])
        try:
            while backlog:
                self._run(backlog.popleft())
        finally:
            self._local.backlog = None

    def _worker(self, q: queue.Queue) -> None:
        while True:
            item = q.get()
            if item is None:
                return
            self._run(item)

    def _run(self, item: _Item) -> None:
        try:
            if item.depth > self.depth_cap:
                raise DepthExceeded(f"derivation depth {item.depth} exceeds cap {self.depth_cap}")
            for p in self.process(item.event, item.only):
                self.publish(p, item.depth + 1)
        except Exception as exc:  # noqa: BLE001 - faults are collected, the worker keeps going
            log.error("dispatch fault on %s %s: %s", item.event.kind, item.event.name, exc)
            self.faults.append(Fault(item.event, exc))
        finally:
            with self._idle:
                self._pending -= 1
                if self._pending == 0:
                    self._idle.notify_all()

    def process(self, e: Event, only: tuple[str, int] | None = None) -> list[Event]:
        """All products of ``e``, computed against the current store."""
        products: list[Event] = []
        before = self._seq_of(e) if self._seq_of is not None else None
        for rule, link in self.topology.consumers(e):
            if only is not None and only != (rule.rule_name, link):
                continue
            if link == 0:
                products.extend(Emitter(rule)(e))
            else:
                products.extend(Matcher(rule, link, self.endpoint)(e, before=before))
        return products

    def wait_idle(self, timeout: float | None = None) -> bool:
        with self._idle:
            return self._idle.wait_for(lambda: self._pending == 0, timeout)

    def close(self) -> None:
        self.wait_idle(5.0)
        for q in self._queues:
            q.put(None)
        for t in self._threads:
            t.join(timeout=5.0)


def run_to_fixpoint(rules: Iterable[RuleDef], facts: Iterable[Event], store=None) -> list[Event]:
    """Dispatch ``facts`` through ``rules`` and return every stored event."""
    from .store import MemoryStore

    store = store if store is not None else MemoryStore()
    d = Dispatcher(store, Topology(rules))
    for f in facts:
        if store.put(f):
            d.submit(f)
    return store.events()

