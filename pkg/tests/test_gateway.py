import pytest
from hypothesis import given
from hypothesis import strategies as st
from support import ev, rule

from mip import interset
from mip.engine import Emitter
from mip.events import PERM_VERSIONS, Event
from mip.gateway import (
    Gateway,
    NoSuchPath,
    NoSuchVersion,
    authenticate,
    identity_pred,
    init_event,
    rule_version_verifier,
    select_version,
    static_content,
    translate_names,
)


class MockDB:
    """Answers queries from a table of (name, key) -> events and logs them."""

    def __init__(self, table=None):
        self.table = table or {}
        self.requests = []

    def __call__(self, req):
        self.requests.append(req)
        return list(self.table.get((req["name"], req["key"]), ()))


def friend(key, data, ts=1000, change=1, writers=frozenset({"perm.AAA"}), readers=frozenset()):
    return ev("fact", "perm.AAA/friend", key, [data], ts=ts, change=change, writers=writers, readers=readers)


# -- identity predicate ------------------------------------------------------

def test_nobody_is_in_any_set():
    nobody = identity_pred(MockDB(), None)
    assert nobody(frozenset({("this",), ("is",), ("ignored",)})) is False


def test_singleton_group():
    assert identity_pred(MockDB(), "alice")(frozenset({"alice"})) is True


def test_membership_by_rules_and_cache():
    db = MockDB({
        ("perm.AAA/friend", "alice"): [friend("alice", f) for f in ("bob", "charlie")],
        ("perm.BBB/group-owner", "alice"): [
            ev("fact", "perm.BBB/group-owner", "alice", [g], ts=2000, writers=frozenset({"perm.BBB"}))
            for g in ("Dogs for Free Wifi", "Hansters for Free Time")
        ],
    })
    alice_in_set = identity_pred(db, "alice")
    s = (frozenset({("perm.AAA/friend", "bob")}), frozenset({("perm.BBB/group-owner", "Cats for Free Speach")}))
    assert alice_in_set(s) is True
    assert db.requests == [
        {"kind": "fact", "name": "perm.AAA/friend", "key": "alice"},
        {"kind": "fact", "name": "perm.BBB/group-owner", "key": "alice"},
    ]
    assert alice_in_set(frozenset({("perm.AAA/friend", "eve")})) is False
    assert alice_in_set(frozenset({("perm.BBB/group-owner", "Dogs for Free Wifi")})) is True
    assert len(db.requests) == 2


def test_membership_is_accumulated():
    db = MockDB({("perm.AAA/friend", "alice"): [friend("alice", "eve", ts=1000),
                                                 friend("alice", "eve", ts=2000, change=-1)]})
    assert identity_pred(db, "alice")(frozenset({("perm.AAA/friend", "eve")})) is False


FORGED = Event("fact", "perm.AAA/friend", "eve", ("alice",), ts=3000, change=1,
               writers=frozenset({"eve"}), readers=frozenset())


def test_forged_friend_is_ignored():
    db = MockDB({("perm.AAA/friend", "eve"): [FORGED]})
    assert identity_pred(db, "eve")(frozenset({("perm.AAA/friend", "alice")})) is False


EVIL_PLAN = rule({
    "name": "evil-plan",
    "links": [{"fact": "social-app/message", "key": "bob", "args": ["alice", "?msg"],
               "guards": [["by", "alice"]]}],
    "output": {"key": "eve", "args": ["?msg"]},
}, ns="gateway.core-test")

BOBS_MESSAGE = Event("fact", "social-app/message", "bob", ("alice", "I like you!"), ts=1234, change=1,
                     writers=frozenset({"alice"}), readers=frozenset({"bob"}))


def test_evil_plan_output_is_unreadable_by_eve():
    evil_facts = Emitter(EVIL_PLAN)(BOBS_MESSAGE)
    assert evil_facts == [Event("fact", "gateway.core-test/evil-plan", "eve", ("I like you!",), ts=1234, change=1,
                                writers=frozenset({"gateway.core-test"}), readers=frozenset({"bob"}))]
    db = MockDB({("gateway.core-test/evil-plan", "eve"): evil_facts})
    assert identity_pred(db, "eve")(frozenset({("gateway.core-test/evil-plan", "I like you!")})) is False


@given(st.lists(st.lists(st.sampled_from(["alice", "bob", ("g/f", "x"), ("g/h",)]), max_size=3), max_size=3))
def test_anonymous_predicate_is_constantly_false(components):
    s = tuple(frozenset(c) for c in components)
    assert identity_pred(MockDB(), None)(interset.uncanonical(s)) is False


# -- event gateway -----------------------------------------------------------

def listing_gateway(user="alice", version="ver123"):
    return Gateway(
        user, version,
        pred=lambda s: interset.subset(frozenset({user, ("some-cred",)}), s),
        verifier=lambda ver, writers: interset.contains(writers, f"hash-in-{ver}"),
    )


def fact(name="foo", writers=frozenset({"alice"}), readers=frozenset()):
    return Event("fact", name, writers=writers, readers=readers)


def test_events_flow_both_ways():
    gw = listing_gateway()
    assert gw.to_server(fact()) == fact()
    assert gw.to_client(fact()) == fact()


@pytest.mark.parametrize("e", [
    fact(writers=frozenset({"alice"})),
    fact(writers=frozenset({"hash-in-ver123"})),
    fact("some-ns/foo", writers=frozenset({"some-ns", ("some-other-cred",)})),
])
def test_server_to_client_pass_conditions(e):
    assert listing_gateway().to_client(e) == e


@pytest.mark.parametrize("e", [
    fact(writers=frozenset({"unauthorized"})),
    fact(readers=frozenset({"not-alice", ("some-cred",)})),
])
def test_server_to_client_blocks(e):
    assert listing_gateway().to_client(e) is None


def test_rule_events_never_reach_clients():
    assert listing_gateway().to_client(Event("rule", "foo", writers=frozenset({"alice"}),
                                             readers=frozenset())) is None


def test_malicious_client_blocked():
    assert listing_gateway().to_server(fact(writers=frozenset({"bob", ("some-cred",)}))) is None


def test_readability_fix():
    got = listing_gateway().to_server(fact(readers=frozenset({("perm.AAA/friend", "alice")})))
    assert got == fact(readers=(frozenset({("perm.AAA/friend", "alice")}), frozenset({"alice"})))
    assert isinstance(got.readers, tuple)


def test_registration_events():
    gw = listing_gateway()
    reg = Event("reg", "foo", 123)
    assert gw.to_server(reg) == reg
    assert gw.to_server(Event("reg", "foo", "bar")) is not None
    assert gw.to_server(Event("reg", "foo")) is None
    assert gw.to_server(Event("reg", None, "bar")) is None


def test_anonymous_session_sees_only_public_self_verified_facts():
    gw = Gateway(None, None, identity_pred(MockDB(), None))
    public = fact("ns/x", writers=frozenset({"ns"}))
    assert gw.to_client(public) == public
    assert gw.to_client(fact("ns/x", writers=frozenset({"ns"}), readers=frozenset({"bob"}))) is None
    assert gw.to_server(fact(writers=frozenset())) is None


# -- version verification, names, metadata -------------------------------------

def perm_versions_event(ver, code, static=None):
    return Event("fact", PERM_VERSIONS, ver, (code, static or {}), ts=1, change=1,
                 writers=frozenset(), readers=frozenset())


def test_rule_version_verifier():
    code = {"foo": "some-hash", "bar": "some-other-hash"}
    db = MockDB({(PERM_VERSIONS, v): [perm_versions_event(v, code)] for v in ("ver123", "ver234")})
    verify = rule_version_verifier(db)
    assert verify("ver123", frozenset({"some-hash", ("something-else",)})) is True
    assert db.requests == [{"kind": "fact", "name": PERM_VERSIONS, "key": "ver123"}]
    assert verify("ver234", frozenset({"some-hash-that-does-not-exist", ("something-else",)})) is False
    before = len(db.requests)
    assert verify("ver123", frozenset({"some-other-hash", ("something-else",)})) is True
    assert verify("ver123", frozenset({"some-hash-that-does-not-exist", ("something-else",)})) is False
    assert len(db.requests) == before
    assert verify("unknown", frozenset({"some-hash"})) is False


def test_translate_names():
    base = {"key": 123, "data": (1, 2, 3)}
    table = {"foo.core": "perm.AAA"}
    plain = Event("fact", "some/name", writers=frozenset({"someone"}), readers=frozenset(), **base)
    assert translate_names(plain, table) == plain
    assert translate_names(Event("fact", "foo.core/something", writers=frozenset({"someone"}),
                                 readers=frozenset(), **base), table).name == "perm.AAA/something"
    got = translate_names(Event("fact", "foo.core/something", writers=frozenset({"someone", ("foo.core/bar", 8)}),
                                readers=frozenset({("foo.core/baz", 15)}), **base), table)
    assert got == Event("fact", "perm.AAA/something", writers=frozenset({"someone", ("perm.AAA/bar", 8)}),
                        readers=frozenset({("perm.AAA/baz", 15)}), **base)
    bare = translate_names(Event("fact", "foo.core/something", **base), table)
    assert bare == Event("fact", "perm.AAA/something", **base)
    assert bare.writers is None and bare.readers is None


def test_translation_round_trip():
    table = {"foo.core": "perm.AAA", "bar.core": "perm.BBB"}
    e = Event("fact", "bar.core/x", 1, (2,), writers=frozenset({("foo.core/f", "a")}),
              readers=(frozenset({("bar.core/g",)}), frozenset({"u"})))
    up = translate_names(e, table, "to-server")
    assert up.name == "perm.BBB/x"
    assert translate_names(up, table, "to-client") == e


def test_authenticate():
    assert authenticate({}, {"user_identity": {"value": "foobar"}}) == "foobar"
    assert authenticate({"_identity": "barfoo"}, {"user_identity": {"value": "foobar"}}) == "barfoo"
    assert authenticate({}, {}) is None


def test_select_version():
    assert select_version({}, {"app-version": {"value": "ver123"}}, "ver456") == "ver123"
    assert select_version({"_ver": "ver234"}, {}) == "ver234"
    assert select_version({}, {}, "ver456") == "ver456"


def test_init_event():
    assert init_event("alice").to_dict() == {"kind": "init", "name": "axiom/client-info", "identity": "alice"}


def test_static_content():
    def unhash(h):
        if h != "the-hash-code":
            raise KeyError(h)
        return b"the content"

    db = MockDB({(PERM_VERSIONS, "ver123"): [perm_versions_event("ver123", {}, {"/foo.html": "the-hash-code"})]})
    assert static_content(db, unhash, "ver123", "/foo.html") == (b"the content", "text/html")
    assert db.requests == [{"kind": "fact", "name": PERM_VERSIONS, "key": "ver123"}]
    with pytest.raises(NoSuchPath):
        static_content(db, unhash, "ver123", "/bar.html")
    with pytest.raises(NoSuchVersion) as info:
        static_content(MockDB(), unhash, "ver123", "/bar.html")
    assert str(info.value) == "No Such Version: ver123"
