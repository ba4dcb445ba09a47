"""Command line entry point: ``mip <command>``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import statistics
import sys
import tempfile
import threading
import time
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from .. import interset
from ..events import FACT, Event, accumulate_all
from ..fixtures import TWEETMI_DIR, tweetmi_events
from ..gateway import identity_pred, perm_versions
from ..store import MemoryStore, open_store
from .client import Connection
from .platform import Platform
from .server import Server

DEFAULTS = {
    "host": "127.0.0.1",
    "port": 8080,
    "data_dir": os.environ.get("MIP_DATA_DIR"),
    "shards": 3,
    "workers": 4,
    "window": 30.0,
    "default_version": None,
    "default_identity": None,
}


def load_config(path: str | None) -> dict:
    config = dict(DEFAULTS)
    if path:
        with open(path, encoding="utf-8") as f:
            config.update(json.load(f))
    return config


def open_platform(config: dict, workers: int | None = None) -> Platform:
    data_dir = config.get("data_dir")
    if data_dir:
        root = Path(data_dir)
        root.mkdir(parents=True, exist_ok=True)
        store = open_store(root / "log")
    else:
        store = MemoryStore()
    return Platform(store, shards=config["shards"], workers=config["workers"] if workers is None else workers,
                    window=config["window"], state_dir=Path(data_dir) if data_dir else None)


def parse_key(text: str) -> Any:
    try:
        return json.loads(text)
    except ValueError:
        return text


def _resolve_name(platform: Platform, name: str, version: str | None) -> str:
    if not version:
        return name
    found = perm_versions(platform.store.request, version)
    if found is None:
        raise SystemExit(f"unknown version {version}")
    ns, sep, rest = name.partition("/")
    return f"{found[0][ns]}/{rest}" if sep and ns in found[0] else name


# -- commands ----------------------------------------------------------------

def cmd_serve(args, config) -> int:
    platform = open_platform(config)
    server = Server(platform, config["host"], config["port"], config["default_version"],
                    config["default_identity"])
    host, port = server.address
    print(f"listening on {host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.close()
        platform.close()
    return 0


def cmd_deploy(args, config) -> int:
    platform = open_platform(config)
    try:
        e = platform.deploy(args.version, args.dir)
        if not platform.wait_idle(args.timeout):
            print("migration did not finish in time", file=sys.stderr)
            return 1
        print(json.dumps({"version": args.version, "modules": e.data[0], "static": e.data[1]}, indent=2))
    finally:
        platform.close()
    return 0


def _read_events(path: str) -> list[Event]:
    text = sys.stdin.read() if path == "-" else Path(path).read_text("utf-8")
    text = text.strip()
    if text.startswith("["):
        objs = json.loads(text)
    else:
        objs = [json.loads(line) for line in text.splitlines() if line.strip()]
    return [Event.from_dict(o) for o in objs]


def cmd_publish(args, config) -> int:
    platform = open_platform(config)
    try:
        stored = 0
        for e in _read_events(args.file):
            if e.kind != FACT:
                print(f"skipping {e.kind} event: only facts can be published", file=sys.stderr)
                continue
            if e.readers is None:
                e = e.replace(readers=interset.universe)
            stored += platform.publish(e)
        platform.wait_idle()
        print(f"{stored} new events stored")
    finally:
        platform.close()
    return 0


def cmd_query(args, config) -> int:
    platform = open_platform(config, workers=0)
    try:
        name = _resolve_name(platform, args.name, args.version)
        key = parse_key(args.key)
        if args.exact:
            rows = platform.store.query(args.kind, name, key)
        else:
            rows = platform.store.query_prefix(args.kind, name, key)
        for e in accumulate_all(rows):
            print(e.dumps())
    finally:
        platform.close()
    return 0


def cmd_member(args, config) -> int:
    platform = open_platform(config, workers=0)
    try:
        s = interset.from_json(json.loads(args.set))
        print("true" if identity_pred(platform.store.request, args.user)(s) else "false")
    finally:
        platform.close()
    return 0


def cmd_fixture(args, config) -> int:
    platform = open_platform(config)
    try:
        stored = sum(platform.publish(e) for e in tweetmi_events())
        if args.deploy:
            platform.deploy(args.version, TWEETMI_DIR)
        platform.wait_idle()
        print(f"{stored} fixture events stored")
    finally:
        platform.close()
    return 0


# -- benchmark ---------------------------------------------------------------

BENCH_MODULE = {
    "module_name": "bench.core",
    "imports": [],
    "rules": [
        {"name": "one-link",
         "links": [{"fact": "bench/ping1", "key": "?id", "args": ["?t"], "guards": [["by-anyone"]]}],
         "output": {"key": "?id", "args": ["?t"]}},
        {"name": "two-link",
         "links": [{"fact": "bench/ping2", "key": "?id", "args": ["?t"], "guards": [["by-anyone"]]},
                   {"fact": "bench/pong", "key": "?id", "args": ["?u"], "guards": [["by-anyone"]]}],
         "output": {"key": "?id", "args": ["?t", "?u"]}},
    ],
}


class _Arrivals:
    def __init__(self):
        self._cond = threading.Condition()
        self._seen: dict[tuple, float] = {}

    def __call__(self, msg: dict) -> None:
        with self._cond:
            self._seen[(msg["name"], json.dumps(msg["key"]))] = time.perf_counter()
            self._cond.notify_all()

    def wait(self, name: str, key: Any, timeout: float = 10.0) -> float:
        k = (name, json.dumps(key))
        with self._cond:
            if not self._cond.wait_for(lambda: k in self._seen, timeout):
                raise TimeoutError(f"no {name} for {key}")
            return self._seen[k]


def run_bench(runs: int = 20, workers: int = 4) -> dict:
    """Mean publish-to-delivery latency of a one-link and a two-link rule."""
    with tempfile.TemporaryDirectory() as tmp:
        src = Path(tmp) / "src"
        src.mkdir()
        (src / "bench.core.json").write_text(json.dumps(BENCH_MODULE), "utf-8")
        platform = Platform(workers=workers)
        platform.deploy("bench", tmp)
        platform.wait_idle()
    server = Server(platform, default_version="bench").start()
    latencies: dict[str, list[float]] = {"one-link": [], "two-link": []}
    try:
        host, port = server.address
        with Connection(host, port, params={"_identity": "bench"}) as conn:
            arrivals = _Arrivals()
            conn.sub("bench.core/one-link", arrivals)
            conn.sub("bench.core/two-link", arrivals)
            for i in range(runs):
                for rule, ping in (("one-link", "bench/ping1"), ("two-link", "bench/ping2")):
                    key = f"{rule}-{i}"
                    conn.pub({"kind": "reg", "name": f"bench.core/{rule}", "key": key})
                    if rule == "two-link":
                        conn.pub({"kind": "fact", "name": "bench/pong", "key": key, "data": ["pong"],
                                  "ts": 1 + i, "change": 1})
                        time.sleep(0.005)
                    start = time.perf_counter()
                    conn.pub({"kind": "fact", "name": ping, "key": key, "data": [i], "change": 1,
                              "ts": 100_000 + i})
                    latencies[rule].append(arrivals.wait(f"bench.core/{rule}", key) - start)
    finally:
        server.close()
        platform.close()
    return {
        rule: {"runs": len(xs), "mean_ms": statistics.mean(xs) * 1000, "median_ms": statistics.median(xs) * 1000}
        for rule, xs in latencies.items()
    }


def cmd_bench(args, config) -> int:
    report = run_bench(args.runs, config["workers"])
    for rule, r in report.items():
        print(f"{rule}: mean {r['mean_ms']:.3f} ms, median {r['median_ms']:.3f} ms over {r['runs']} runs")
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mip", description="Managed information platform")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--data-dir", help="persistent data directory (default: in memory, or $MIP_DATA_DIR)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("serve", help="run the TCP server")
    s.add_argument("--host")
    s.add_argument("--port", type=int)
    s.add_argument("--default-version")
    s.set_defaults(fn=cmd_serve)

    s = sub.add_parser("deploy", help="publish a version directory and migrate its rules")
    s.add_argument("version")
    s.add_argument("dir")
    s.add_argument("--timeout", type=float, default=300.0)
    s.set_defaults(fn=cmd_deploy)

    s = sub.add_parser("publish", help="publish fact events from a JSON file (or - for stdin)")
    s.add_argument("file")
    s.set_defaults(fn=cmd_publish)

    s = sub.add_parser("query", help="print accumulated events; the key also matches compound-key prefixes")
    s.add_argument("kind", choices=["fact", "rule"])
    s.add_argument("name")
    s.add_argument("key", help="JSON value, or a bare string")
    s.add_argument("--version", help="translate module names through this app version")
    s.add_argument("--exact", action="store_true", help="match the key exactly")
    s.set_defaults(fn=cmd_query)

    s = sub.add_parser("member", help="is USER a member of the interset SET, e.g. [{\"grp\": [\"ns/follower\", \"bob\"]}]?")
    s.add_argument("user")
    s.add_argument("set")
    s.set_defaults(fn=cmd_member)

    s = sub.add_parser("fixture", help="publish the TweetMI seed data")
    s.add_argument("--deploy", action="store_true", help="also deploy the TweetMI application")
    s.add_argument("--version", default="tweetmi-1")
    s.set_defaults(fn=cmd_fixture)

    s = sub.add_parser("bench", help="compare one-link and two-link latency on localhost")
    s.add_argument("--runs", type=int, default=20)
    s.set_defaults(fn=cmd_bench)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    config = load_config(args.config)
    if args.data_dir:
        config["data_dir"] = args.data_dir
    for opt in ("host", "port", "default_version"):
        if getattr(args, opt, None) is not None:
            config[opt] = getattr(args, opt)
    return args.fn(args, config)


if __name__ == "__main__":
    sys.exit(main())
