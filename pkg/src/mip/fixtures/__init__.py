"""The TweetMI example application and its seed data."""

from __future__ import annotations

from collections.abc import Iterator
from pathlib import Path

from ..events import FACT, Event

TWEETMI_DIR = Path(__file__).parent / "tweetmi"
TWEETMI_MODULE = "tweetmi.core"
TWEETED = "tweetmi/tweeted"
FOLLOWS = "tweetmi/follows"

USERS = ("alice", "bob", "charlie")
GREETINGS = ("hello", "hi", "howdy")
GREETED = ("world", "clojure", "axiom")


def tweetmi_events(users=USERS, start_ts: int = 1000) -> Iterator[Event]:
    """Every user greets everything three ways, then everyone follows everyone else.

    The clock advances once per tweet and once per (follower, followee)
    pair, self pairs included, so all events fall on day 0.
    """
    ts = start_ts
    for greeting in GREETINGS:
        for greeted in GREETED:
            for user in users:
                yield Event(FACT, TWEETED, user, (f"{greeting} {greeted} from {user}", ts, {}),
                            ts=ts, change=1, writers=frozenset({user}), readers=frozenset())
                ts += 1
    for u1 in users:
        for u2 in users:
            if u1 != u2:
                yield Event(FACT, FOLLOWS, u1, (u2,), ts=ts, change=1,
                            writers=frozenset({u1}), readers=frozenset())
            ts += 1
