"""Shared builders for tests."""

from mip.events import Event
from mip.rules import RuleDef

NS = "cloudlog-events.core_test"


def ev(kind, name, key, data, **kw):
    """An event with the defaults used throughout the listings."""
    base = {"ts": 1, "change": 1, "writers": frozenset(), "readers": frozenset()}
    base.update(kw)
    return Event(kind, name, key, data, **base)


def kw(name):
    """A keyword-like term: a group with no arguments."""
    return (name,)


def rule(obj, ns=NS):
    return RuleDef.from_json(obj, ns)


FOO_YX = rule({
    "name": "foo-yx",
    "links": [{"fact": "test/foo", "key": "?x", "args": ["?y"], "guards": [["by-anyone"]]}],
    "output": {"key": "?y", "args": ["?x"]},
})

TIMELINE = rule({
    "name": "timeline",
    "links": [
        {"fact": "test/follows", "key": "?user", "args": ["?author"], "guards": [["by-anyone"]]},
        {"fact": "test/tweeted", "key": "?author", "args": ["?tweet"], "guards": [["by-anyone"]]},
    ],
    "output": {"key": "?user", "args": ["?tweet"]},
})

TICKET_BY_GENDER_AND_LOCATION = rule({
    "name": "ticket-by-gender-and-location",
    "links": [{
        "fact": "test/ticket", "key": "?ticket-id", "args": ["?gender", "?age", "?loc"],
        "guards": [["by-anyone"]],
    }],
    "output": {"key": ["tuple", "?gender", "?loc"], "args": ["?ticket-id", "?age"]},
})

DATING_MATCHES = rule({
    "name": "dating-matches",
    "links": [
        {"fact": "test/watch", "key": "?watch-id", "args": ["?gender", "?loc", "?min-age", "?max-age"],
         "guards": [["by-anyone"]]},
        {"fact": "ticket-by-gender-and-location", "key": ["tuple", "?gender", "?loc"],
         "args": ["?ticket-id", "?age"],
         "guards": [["by-anyone"], ["when", ["and", ["<=", "?age", "?max-age"], [">=", "?age", "?min-age"]]]]},
    ],
    "output": {"key": "?watch-id", "args": ["?ticket-id"]},
})
