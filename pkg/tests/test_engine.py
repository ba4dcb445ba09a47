import random
import threading

import pytest
from support import (
    DATING_MATCHES,
    FOO_YX,
    NS,
    TICKET_BY_GENDER_AND_LOCATION,
    TIMELINE,
    ev,
    kw,
    rule,
)

from mip.engine import (
    Dispatcher,
    Emitter,
    Matcher,
    MatchTimeout,
    Multiplier,
    RecentWindow,
    ReplyChannel,
    Topology,
    accumulate_query,
    initial_rule_event,
    product_ts,
)
from mip.events import accumulate_all
from mip.rules import RuleDef
from mip.store import MemoryStore

W = frozenset({NS})


# -- emitter -------------------------------------------------------------

def test_emitter_simple_rule():
    assert Emitter(FOO_YX)(ev("fact", "test/foo", 2, [3])) == [
        ev("fact", f"{NS}/foo-yx", 3, [2], writers=W)
    ]


def test_emitter_join_emits_rule_tuple():
    assert Emitter(TIMELINE)(ev("fact", "test/follows", "alice", ["bob"])) == [
        ev("rule", f"{NS}/timeline!0", "bob", ["alice", "bob"], writers=W)
    ]


def test_emitter_overrides_writers():
    got = Emitter(FOO_YX)(ev("fact", "test/foo", 2, [3], writers=frozenset({kw("foo"), kw("bar")})))
    assert got == [ev("fact", f"{NS}/foo-yx", 3, [2], writers=W)]


def test_emitter_splits_atomic_update():
    assert Emitter(FOO_YX)(ev("fact", "test/foo", 2, [3], removed=[1])) == [
        ev("fact", f"{NS}/foo-yx", 3, [2], writers=W),
        ev("fact", f"{NS}/foo-yx", 1, [2], change=-1, writers=W),
    ]


def test_emitter_keeps_ts():
    assert Emitter(FOO_YX)(ev("fact", ":test/foo", 1, [2], ts=1234))[0].ts == 1234


# -- multiplier ----------------------------------------------------------

mult1 = Multiplier(TIMELINE, 1)


def test_multiplier():
    got = mult1(ev("rule", f"{NS}/timeline!0", "bob", ["alice", "bob"], writers=W),
                ev("fact", "test/tweeted", "bob", ["something"]))
    assert got == [ev("fact", f"{NS}/timeline", "alice", ["something"], writers=W)]


def test_multiplier_multiplies_change():
    got = mult1(ev("rule", f"{NS}/timeline!0", "bob", ["alice", "bob"], change=2),
                ev("fact", "test/tweeted", "bob", ["something"], change=3))
    assert got == [ev("fact", f"{NS}/timeline", "alice", ["something"], change=6)]


def test_multiplier_atomic_update_in_fact():
    got = mult1(ev("rule", f"{NS}/timeline!0", "bob", ["alice", "bob"]),
                ev("fact", "test/tweeted", "bob", ["something else"], removed=["something"]))
    assert got == [ev("fact", f"{NS}/timeline", "alice", ["something else"], removed=["something"])]


def test_multiplier_atomic_update_in_rule():
    got = mult1(ev("rule", f"{NS}/timeline!0", "bob", ["eve", "bob"], removed=["alice", "bob"]),
                ev("fact", "test/tweeted", "bob", ["something"]))
    assert got == [
        ev("fact", f"{NS}/timeline", "eve", ["something"]),
        ev("fact", f"{NS}/timeline", "alice", ["something"], change=-1),
    ]


def test_dating_readers_intersection():
    alices_ticket = ev("fact", ":test/ticket", 1234, [":female", 35, "NYC"],
                       readers=frozenset({kw("male"), kw("long-time-users")}))
    ticket_ev = Emitter(TICKET_BY_GENDER_AND_LOCATION)(alices_ticket)[0]
    assert ticket_ev.readers == frozenset({kw("male"), kw("long-time-users")})

    bobs_watch = ev("fact", ":test/watch", 9876, [":female", "NYC", 30, 40],
                    readers=frozenset({kw("male"), ("user=", "bob")}))
    match_ev = Emitter(DATING_MATCHES)(bobs_watch)[0]
    assert match_ev.readers == frozenset({kw("male"), ("user=", "bob")})

    out = Multiplier(DATING_MATCHES, 1)(match_ev, ticket_ev)
    assert out[0].readers == frozenset({kw("male"), ("user=", "bob"), kw("long-time-users")})
    assert (out[0].key, out[0].data) == (9876, (1234,))


def test_dating_age_outside_range_yields_nothing():
    ticket = Emitter(TICKET_BY_GENDER_AND_LOCATION)(ev("fact", "test/ticket", 1, [":female", 50, "NYC"]))[0]
    watch = Emitter(DATING_MATCHES)(ev("fact", "test/watch", 2, [":female", "NYC", 30, 40]))[0]
    assert Multiplier(DATING_MATCHES, 1)(watch, ticket) == []


def test_multiplier_writers_come_from_rule():
    got = mult1(ev("rule", f"{NS}/timeline!0", "bob", ["alice", "bob"], writers=frozenset({"example.com"})),
                ev("fact", ":test/tweeted", "bob", ["hello"], writers=frozenset({("user=", "bob")})))
    assert got == [ev("fact", f"{NS}/timeline", "alice", ["hello"], writers=frozenset({"example.com"}))]


def test_multiplier_ts_is_modular_product():
    rnd = random.Random(7)
    for _ in range(100):
        ts1 = rnd.randrange(2_000_000_000) * 1234
        ts2 = rnd.randrange(2_000_000_000) * 1234
        out = mult1(ev("rule", f"{NS}/timeline!0", "bob", ["alice", "bob"], ts=ts1),
                    ev("fact", ":test/tweeted", "bob", ["hello"], ts=ts2))
        assert out[0].ts == (ts1 * ts2) % (1 << 48)


# -- matcher -------------------------------------------------------------

def _threaded_db(replies):
    """A store endpoint answering from another thread, like a remote database."""
    requests = []

    def endpoint(req):
        requests.append(req)
        chan = ReplyChannel(timeout=1.0)

        def answer():
            for e in replies:
                chan.put(e)
            chan.close()

        threading.Thread(target=answer).start()
        return chan

    return endpoint, requests


def test_matcher_rules_for_fact():
    db, requests = _threaded_db([
        ev("rule", f"{NS}/timeline!0", "bob", ["alice", "bob"]),
        ev("rule", f"{NS}/timeline!0", "bob", ["eve", "bob"]),
        ev("rule", f"{NS}/timeline!0", "bob", ["fred", "bob"]),
        ev("rule", f"{NS}/timeline!0", "bob", ["fred", "bob"], change=-1),
    ])
    out = []
    Matcher(TIMELINE, 1, db)(ev("fact", ":test/tweeted", "bob", ["hello"]), out.append)
    assert requests == [{"kind": "rule", "name": f"{NS}/timeline!0", "key": "bob"}]
    assert out == [
        ev("fact", f"{NS}/timeline", "eve", ["hello"]),
        ev("fact", f"{NS}/timeline", "alice", ["hello"]),
        None,
    ]


def test_matcher_facts_for_rule():
    db, requests = _threaded_db([
        ev("fact", "test/tweeted", "bob", ["hello"]),
        ev("fact", "test/tweeted", "bob", ["world"]),
    ])
    out = []
    Matcher(TIMELINE, 1, db)(ev("rule", f"{NS}/timeline!0", "bob", ["alice", "bob"]), out.append)
    assert requests == [{"kind": "fact", "name": "test/tweeted", "key": "bob"}]
    assert out == [
        ev("fact", f"{NS}/timeline", "alice", ["world"]),
        ev("fact", f"{NS}/timeline", "alice", ["hello"]),
        None,
    ]


def test_matcher_without_counterparts_just_ends():
    out = []
    assert Matcher(TIMELINE, 1, lambda req: [])(ev("fact", "test/tweeted", "x", ["y"]), out.append) == []
    assert out == [None]


def test_matcher_timeout():
    silent = ReplyChannel(timeout=0.05)
    with pytest.raises(MatchTimeout):
        Matcher(TIMELINE, 1, lambda req: silent)(ev("fact", "test/tweeted", "x", ["y"]))


def test_accumulate_query():
    def mock_db(req):
        return [ev("fact", "foo/bar", "k1", [1, 2]),
                ev("fact", "foo/bar", "k2", [3, 4]),
                ev("fact", "foo/bar", "k1", [1, 2], change=-1)]

    db = accumulate_query(mock_db)
    assert set(db({"some": "request"})) == {ev("fact", "foo/bar", "k2", [3, 4])}
    assert set(db({"some": "request"})) == {ev("fact", "foo/bar", "k2", [3, 4])}
    assert accumulate_query(lambda req: [])({}) == []


# -- rule events ---------------------------------------------------------

def test_initial_rule_event():
    r = rule(TIMELINE.to_json(), ns=None)
    r = RuleDef("perm.x/timeline", r.links, r.output)
    a, b = initial_rule_event(r), initial_rule_event(r)
    assert a.writers == frozenset({"perm.x"}) and a.readers == frozenset()
    assert a.change == 1 and a.kind == "rule"
    assert a.ts != b.ts


# -- dispatch ------------------------------------------------------------

def _dispatch(rules, facts, workers=0):
    store = MemoryStore()
    d = Dispatcher(store, Topology(rules), workers=workers)
    for f in facts:
        if store.put(f):
            d.submit(f)
    d.wait_idle(10)
    d.close()
    return store, d


def _derived(store, name):
    return {(e.key, e.data) for e in accumulate_all(store.events()) if e.name == name}


def test_dispatch_join():
    store, _ = _dispatch([TIMELINE], [ev("fact", "test/follows", "a", ["b"], ts=10),
                                      ev("fact", "test/tweeted", "b", ["T"], ts=20)])
    assert _derived(store, f"{NS}/timeline") == {("a", ("T",))}


def test_dispatch_order_does_not_matter():
    store, _ = _dispatch([TIMELINE], [ev("fact", "test/tweeted", "b", ["T"], ts=20),
                                      ev("fact", "test/follows", "a", ["b"], ts=10)])
    assert _derived(store, f"{NS}/timeline") == {("a", ("T",))}


def test_duplicate_delivery_is_swallowed():
    tweet = ev("fact", "test/tweeted", "b", ["T"], ts=20)
    store, _ = _dispatch([TIMELINE], [ev("fact", "test/follows", "a", ["b"], ts=10), tweet, tweet])
    [derived] = [e for e in accumulate_all(store.events()) if e.name == f"{NS}/timeline"]
    assert derived.change == 1


def test_cancellation_before_tweet():
    store, _ = _dispatch([TIMELINE], [
        ev("fact", "test/follows", "a", ["b"], ts=10),
        ev("fact", "test/follows", "a", ["b"], ts=11, change=-1),
        ev("fact", "test/tweeted", "b", ["T"], ts=20),
    ])
    assert _derived(store, f"{NS}/timeline") == set()


def test_threaded_dispatch_matches_inline():
    rnd = random.Random(3)
    users = ["u0", "u1", "u2", "u3"]
    facts = []
    ts = 100
    for a in users:
        for b in users:
            if a != b and rnd.random() < 0.6:
                ts += 1
                facts.append(ev("fact", "test/follows", a, [b], ts=ts))
    for u in users:
        for i in range(3):
            ts += 1
            facts.append(ev("fact", "test/tweeted", u, [f"{u}-{i}"], ts=ts))
    rnd.shuffle(facts)
    inline, _ = _dispatch([TIMELINE], facts)
    threaded, d = _dispatch([TIMELINE], facts, workers=4)
    assert not d.faults
    assert _derived(threaded, f"{NS}/timeline") == _derived(inline, f"{NS}/timeline")


def test_depth_cap_is_reported():
    loop = rule({
        "name": "loop",
        "links": [{"fact": f"{NS}/loop", "key": "?n", "args": [], "guards": [["by-anyone"]]}],
        "output": {"key": ["inc", "?n"], "args": []},
    })
    store = MemoryStore()
    d = Dispatcher(store, Topology([loop]), depth_cap=5)
    seed = ev("fact", f"{NS}/loop", 0, [], ts=3)
    store.put(seed)
    d.submit(seed)
    assert len(d.faults) == 1
    assert "exceeds cap" in str(d.faults[0].error)
    assert len(store.query("fact", f"{NS}/loop", 6)) == 1


def test_recent_window_fills_store_gaps():
    now = [0.0]
    w = RecentWindow(span=30, clock=lambda: now[0])
    e = ev("rule", f"{NS}/timeline!0", "bob", ["alice", "bob"])
    w.add(e)
    merged = w.merged(lambda req: [])
    assert merged({"kind": "rule", "name": e.name, "key": "bob"}) == [e]
    assert w.merged(lambda req: [e])({"kind": "rule", "name": e.name, "key": "bob"}) == [e]
    now[0] = 31.0
    assert merged({"kind": "rule", "name": e.name, "key": "bob"}) == []


def test_product_ts():
    assert product_ts(3, 5) == 15
    assert product_ts(1 << 47, 4) == 0


def test_retraction_arriving_before_its_fact():
    store, _ = _dispatch([TIMELINE], [
        ev("fact", "test/tweeted", "b", ["T"], ts=21, change=-1),
        ev("fact", "test/follows", "a", ["b"], ts=10),
        ev("fact", "test/tweeted", "b", ["T"], ts=20),
    ])
    assert _derived(store, f"{NS}/timeline") == set()
