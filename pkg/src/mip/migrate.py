"""Version deployment and replay of stored facts through new rules.

A deployment publishes ``axiom/perm-versions``.  The perm tracker counts
module references and announces modules seen for the first time with
``axiom/perms-exist``.  New rules are then migrated by a plan: a DAG of
tasks that declares input queues, replays stored facts shard by shard and
finally announces ``axiom/rule-ready``.  Clauses need no replay and are
announced right away.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import logging
import os
import threading
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from . import interset
from .engine import Emitter, Matcher
from .events import FACT, PERM_VERSIONS, PERMS_EXIST, RULE_READY, Event, canonical_json
from .permastore import Hasher, NotFound, hash_all, hash_static_files, load_modules
from .rules import RuleDef

log = logging.getLogger(__name__)

TS_RANGE = 1 << 47


class UnknownPerm(NotFound):
    pass


def stable_ts(*parts: Any) -> int:
    """A positive ts derived from content, so re-publishing dedups."""
    digest = hashlib.sha256(canonical_json(list(parts)).encode("utf-8")).digest()
    return 1 + int.from_bytes(digest[:8], "big") % TS_RANGE


def queue_name(rule_name: str, link: int) -> str:
    return f"fact-for-rule/{rule_name}!{link}"


# -- perm tracking -----------------------------------------------------------

def perm_tracker(e: Event, counter_add: Callable[[str, int], int], publish: Callable[[Event], Any]) -> None:
    """Count module references; announce modules appearing or disappearing."""
    if not e.change:
        return
    code_map = e.data[0] if e.data else {}
    crossed = set()
    for ref in sorted(set(code_map.values())):
        new = counter_add(f"/perms/{ref}", e.change)
        old = new - e.change
        if e.change > 0 and old <= 0 < new or e.change < 0 and old > 0 >= new:
            crossed.add(ref)
    if crossed:
        publish(Event(FACT, PERMS_EXIST, e.key, (frozenset(crossed),), ts=e.ts,
                      change=1 if e.change > 0 else -1, writers=e.writers))


# -- rule extraction ---------------------------------------------------------

def _is_query(rule: RuleDef) -> bool:
    return rule.links[0].source.name.endswith("?")


def extract_version_rules(hasher: Hasher, ref: str) -> list[RuleDef]:
    try:
        publics = hasher.module_publics(ref)
    except NotFound:
        raise UnknownPerm(ref) from None
    return [r for _, r in sorted(publics.items()) if not _is_query(r)]


def extract_version_clauses(hasher: Hasher, ref: str) -> list[RuleDef]:
    try:
        publics = hasher.module_publics(ref)
    except NotFound:
        raise UnknownPerm(ref) from None
    return [r for _, r in sorted(publics.items()) if _is_query(r)]


def sort_rules(rules: Iterable[RuleDef]) -> list[RuleDef]:
    """Producers before consumers; independent rules by name."""
    by_name = {r.rule_name: r for r in rules}
    produced = {r.output.name: r.rule_name for r in by_name.values()}
    deps = {
        n: {produced[l.source.name] for l in r.links if l.source.name in produced} - {n}
        for n, r in by_name.items()
    }
    users: dict[str, set] = {n: set() for n in by_name}
    for n, ds in deps.items():
        for d in ds:
            users[d].add(n)
    waiting = {n: len(ds) for n, ds in deps.items()}
    ready = [n for n, k in waiting.items() if k == 0]
    heapq.heapify(ready)
    out = []
    while ready:
        n = heapq.heappop(ready)
        out.append(by_name[n])
        for u in users[n]:
            waiting[u] -= 1
            if waiting[u] == 0:
                heapq.heappush(ready, u)
    if len(out) != len(by_name):
        cyclic = sorted(set(by_name) - {r.rule_name for r in out})
        raise ValueError(f"rules depend on each other cyclically: {cyclic}")
    return out


# -- plans -------------------------------------------------------------------

FACT_DECLARER = "fact-declarer"
INITIAL_MIGRATOR = "initial-migrator"
LINK_MIGRATOR = "link-migrator"
END_NOTIFIER = "migration-end-notifier"


@dataclass(frozen=True)
class Task:
    id: int
    kind: str
    args: tuple
    deps: tuple = ()

    def to_json(self) -> list:
        args = [interset.to_json(a) if isinstance(a, (frozenset, tuple)) else a for a in self.args]
        return [self.kind, *args]

    @classmethod
    def from_json(cls, id: int, call: Sequence, deps: Sequence[int]) -> Task:
        kind, *args = call
        if kind == END_NOTIFIER and args[1] is not None:
            args[1] = interset.from_json(args[1])
        return cls(id, kind, tuple(args), tuple(deps))


@dataclass
class Plan:
    prefix: str = "/plans"
    tasks: list[Task] = field(default_factory=list)
    ready: bool = False

    def add_task(self, kind: str, args: tuple, deps: Iterable[int] = ()) -> int:
        if self.ready:
            raise RuntimeError("cannot add tasks to a ready plan")
        task = Task(len(self.tasks) + 1, kind, tuple(args), tuple(deps))
        self.tasks.append(task)
        return task.id

    def mark_as_ready(self) -> None:
        self.ready = True

    def trace(self) -> list:
        """The plan as the sequence of calls that built it."""
        calls: list = [["create-plan", self.prefix]]
        calls += [["add-task", "plan-node", t.to_json(), list(t.deps)] for t in self.tasks]
        if self.ready:
            calls.append(["mark-as-ready", "plan-node"])
        return calls

    @property
    def id(self) -> str:
        return hashlib.sha256(canonical_json(self.trace()).encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_trace(cls, calls: Sequence) -> Plan:
        plan = cls(calls[0][1])
        for call in calls[1:]:
            if call[0] == "add-task":
                plan.tasks.append(Task.from_json(len(plan.tasks) + 1, call[2], call[3]))
            elif call[0] == "mark-as-ready":
                plan.ready = True
        return plan


def plan_rules(rules: Sequence[RuleDef], writers: Any, shards: int, prefix: str = "/plans") -> Plan:
    """Migration plan for ``rules``, taken in the given order."""
    if shards < 1:
        raise ValueError("shards must be positive")
    plan = Plan(prefix)
    previous: list[int] = []
    for r in rules:
        name = r.rule_name
        declarer = plan.add_task(FACT_DECLARER, (name, 0), previous)
        phase = [plan.add_task(INITIAL_MIGRATOR, (name, s, shards), [declarer]) for s in range(shards)]
        for link in range(1, len(r.links)):
            declarer = plan.add_task(FACT_DECLARER, (name, link), phase)
            phase = [plan.add_task(LINK_MIGRATOR, (name, link, s, shards), [declarer]) for s in range(shards)]
        previous = [plan.add_task(END_NOTIFIER, (name, writers), phase)]
    plan.mark_as_ready()
    return plan


def build_plan(
    perms: Iterable[str],
    writers: Any,
    shards: int,
    extract: Callable[[str], Sequence[RuleDef]],
    prefix: str = "/plans",
) -> Plan:
    """Plan the migration of every rule in ``perms``."""
    rules = [r for ref in sorted(perms) for r in extract(ref)]
    return plan_rules(sort_rules(rules), writers, shards, prefix)


# -- task runners ------------------------------------------------------------

@dataclass
class MigrationContext:
    """What migration tasks act on.

    ``declare(queue, binding)`` registers a buffered input queue for a rule
    link; ``publish`` hands events to the platform.
    """

    hasher: Hasher
    store: Any
    publish: Callable[[Event], Any]
    declare: Callable[[str, dict], Any] = lambda queue, binding: None

    def rule(self, rule_name: str) -> RuleDef:
        return self.hasher.eval_symbol(rule_name)


def run_fact_declarer(ctx: MigrationContext, rule_name: str, link: int) -> None:
    r = ctx.rule(rule_name)
    ctx.declare(queue_name(rule_name, link), {"kind": FACT, "name": r.links[link].source.name})


def _replay(ctx: MigrationContext, name: str, shard: int, shards: int, process) -> int:
    sink = ctx.store.write_sink()
    written = 0
    try:
        for f in ctx.store.scan(name, shard, shards):
            for p in process(f):
                sink(p)
                written += 1
    finally:
        sink.close()
    return written


def run_initial_migrator(ctx: MigrationContext, rule_name: str, shard: int, shards: int) -> int:
    r = ctx.rule(rule_name)
    return _replay(ctx, r.links[0].source.name, shard, shards, Emitter(r))


def run_link_migrator(ctx: MigrationContext, rule_name: str, link: int, shard: int, shards: int) -> int:
    r = ctx.rule(rule_name)
    return _replay(ctx, r.links[link].source.name, shard, shards, Matcher(r, link, ctx.store.request))


def rule_ready_event(rule_name: str, writers: Any = None) -> Event:
    return Event(FACT, RULE_READY, 0, (rule_name,), ts=stable_ts(RULE_READY, rule_name),
                 change=1, writers=writers)


def run_end_notifier(ctx: MigrationContext, rule_name: str, writers: Any) -> None:
    ctx.publish(rule_ready_event(rule_name, writers))


RUNNERS = {
    FACT_DECLARER: run_fact_declarer,
    INITIAL_MIGRATOR: run_initial_migrator,
    LINK_MIGRATOR: run_link_migrator,
    END_NOTIFIER: run_end_notifier,
}


def run_task(ctx: MigrationContext, task: Task) -> None:
    RUNNERS[task.kind](ctx, *task.args)


class PlanExecutor:
    """Runs ready plans on a thread pool, honouring task dependencies.

    Completed task ids are recorded in ``state_path`` (when given) after
    each task, so a plan interrupted by a crash resumes where it stopped.
    """

    def __init__(self, ctx: MigrationContext, workers: int = 4, state_path: os.PathLike | str | None = None):
        self.ctx = ctx
        self.workers = max(1, workers)
        self.state_path = Path(state_path) if state_path else None
        self._lock = threading.Lock()
        self._state: dict[str, dict] = {}
        if self.state_path and self.state_path.exists():
            self._state = json.loads(self.state_path.read_text("utf-8"))
        self._running: list[threading.Thread] = []
        self.errors: list[BaseException] = []

    def _save(self) -> None:
        if not self.state_path:
            return
        tmp = self.state_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self._state, sort_keys=True), "utf-8")
        os.replace(tmp, self.state_path)

    def _record(self, plan: Plan, done: int | None = None) -> None:
        with self._lock:
            entry = self._state.setdefault(plan.id, {"trace": plan.trace(), "done": []})
            if done is not None and done not in entry["done"]:
                entry["done"].append(done)
            self._save()

    def done(self, plan: Plan) -> set[int]:
        with self._lock:
            return set(self._state.get(plan.id, {}).get("done", ()))

    def complete(self, plan: Plan) -> bool:
        return self.done(plan) >= {t.id for t in plan.tasks}

    def pending_plans(self) -> list[Plan]:
        """Recorded plans that did not finish."""
        with self._lock:
            traces = [e["trace"] for e in self._state.values()]
        plans = [Plan.from_trace(t) for t in traces]
        return [p for p in plans if not self.complete(p)]

    def execute(self, plan: Plan, resume: bool = True) -> None:
        """Run ``plan`` to completion.

        With ``resume`` tasks recorded as done are skipped; otherwise the
        whole plan runs again, which is safe because every task only
        writes events the store deduplicates.
        """
        if not plan.ready:
            raise RuntimeError("plan is not marked as ready")
        self._record(plan)
        done = self.done(plan) if resume else set()
        todo = {t.id: t for t in plan.tasks if t.id not in done}
        running: dict[Future, Task] = {}
        with ThreadPoolExecutor(self.workers, thread_name_prefix="migrate") as pool:
            while todo or running:
                for t in [t for t in todo.values() if set(t.deps) <= done]:
                    del todo[t.id]
                    running[pool.submit(run_task, self.ctx, t)] = t
                if not running:
                    raise RuntimeError(f"plan {plan.id} is stuck: unmet dependencies")
                finished, _ = wait(running, return_when=FIRST_COMPLETED)
                for fut in finished:
                    t = running.pop(fut)
                    fut.result()
                    done.add(t.id)
                    self._record(plan, t.id)

    def submit(self, plan: Plan, resume: bool = True) -> threading.Thread:
        """Execute ``plan`` in the background."""
        def run():
            try:
                self.execute(plan, resume)
            except Exception as exc:  # noqa: BLE001 - recorded for the caller
                log.error("migration plan %s failed: %s", plan.id, exc)
                self.errors.append(exc)

        th = threading.Thread(target=run, daemon=True, name=f"plan-{plan.id}")
        with self._lock:
            self._running.append(th)
        th.start()
        return th

    def busy(self) -> bool:
        with self._lock:
            return any(t.is_alive() for t in self._running)

    def wait(self, timeout: float | None = None) -> None:
        with self._lock:
            threads = list(self._running)
        for th in threads:
            th.join(timeout)
        with self._lock:
            self._running = [t for t in self._running if t.is_alive()]


# -- services ----------------------------------------------------------------

def rule_migrator(e: Event, ctx: MigrationContext, shards: int, run: Callable[[Plan], Any]) -> Plan | None:
    """React to new modules by planning and running their rule migration."""
    if not e.change or e.change <= 0:
        return None
    plan = build_plan(e.data[0], e.writers, shards, lambda ref: extract_version_rules(ctx.hasher, ref))
    if plan.tasks:
        run(plan)
    return plan


def clause_migrator(
    e: Event,
    ctx: MigrationContext,
    extract: Callable[[str], Sequence[RuleDef]] | None = None,
) -> list[str]:
    """Declare the input queues of new clauses and announce them ready."""
    if not e.change or e.change <= 0:
        return []
    extract = extract or (lambda ref: extract_version_clauses(ctx.hasher, ref))
    announced = []
    for ref in sorted(e.data[0]):
        for clause in extract(ref):
            for link, l in enumerate(clause.links):
                ctx.declare(queue_name(clause.rule_name, link), {"kind": FACT, "name": l.source.name})
            ctx.publish(rule_ready_event(clause.rule_name))
            announced.append(clause.rule_name)
    return announced


def perm_versions_event(version: str, code_map: Mapping, static_map: Mapping, writers: Any = frozenset()) -> Event:
    data = (dict(code_map), dict(static_map))
    return Event(FACT, PERM_VERSIONS, version, data, ts=stable_ts(PERM_VERSIONS, version, data),
                 change=1, writers=writers, readers=interset.universe)


def deploy_dir(hasher: Hasher, version: str, root: os.PathLike | str, publish: Callable[[Event], Any],
               writers: Any = frozenset()) -> Event:
    """Hash a version directory and publish its ``axiom/perm-versions``."""
    root = Path(root)
    code_map = hash_all(hasher, load_modules(root / "src"))
    static_map = hash_static_files(hasher, root / "resources" / "public")
    e = perm_versions_event(version, code_map, static_map, writers)
    publish(e)
    return e
