"""Deduplicating event storage, shard scans and atomic counters."""

from __future__ import annotations

import hashlib
import json
import os
import struct
import threading
from bisect import insort
from collections.abc import Callable, Iterator
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .events import Event, canonical_json, key_json

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = (1 << 64) - 1


class StoreError(Exception):
    pass


class CasConflict(StoreError):
    pass


class ContentionExhausted(StoreError):
    pass


class SinkClosed(StoreError):
    pass


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & MASK64
    return h


def shard_of(key: Any, shards: int) -> int:
    return fnv1a_64(key_json(key).encode("utf-8")) % shards


def _check(e: Event) -> None:
    if e.kind not in ("fact", "rule"):
        raise StoreError(f"only fact and rule events are stored, got {e.kind!r}")
    if not isinstance(e.ts, int) or isinstance(e.ts, bool) or e.ts <= 0:
        raise StoreError(f"event ts must be a positive integer, got {e.ts!r}")
    if not e.change:
        raise StoreError("stored events need a non-zero change")


def _triple(kind: str, name: str, key: Any) -> tuple:
    return (kind, name, key_json(key))


# -- counters --------------------------------------------------------------

class Counters:
    """Versioned integer cells with compare-and-set."""

    def __init__(self, path: Path | None = None):
        self._path = path
        self._lock = threading.Lock()
        self._cells: dict[str, tuple[int, int]] = {}
        if path is not None and path.exists():
            self._cells = {k: tuple(v) for k, v in json.loads(path.read_text()).items()}

    def get(self, path: str) -> tuple[int, int] | None:
        with self._lock:
            return self._cells.get(path)

    def create(self, path: str, value: int) -> None:
        with self._lock:
            if path in self._cells:
                raise CasConflict(f"{path} exists")
            self._cells[path] = (value, 0)
            self._save()

    def compare_and_set(self, path: str, value: int, version: int) -> None:
        with self._lock:
            cur = self._cells.get(path)
            if cur is None or cur[1] != version:
                raise CasConflict(f"{path} changed")
            self._cells[path] = (value, version + 1)
            self._save()

    def _save(self) -> None:
        if self._path is None:
            return
        tmp = self._path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self._cells, sort_keys=True))
        os.replace(tmp, self._path)


def counter_add(counters: Counters, path: str, delta: int, retries: int = 3) -> int:
    last: Exception | None = None
    for _ in range(retries):
        cur = counters.get(path)
        try:
            if cur is None:
                counters.create(path, delta)
                return delta
            value, version = cur
            counters.compare_and_set(path, value + delta, version)
            return value + delta
        except CasConflict as exc:
            last = exc
    raise ContentionExhausted(f"counter {path}: {last}") from last


# -- write sink ------------------------------------------------------------

@dataclass
class WriteSink:
    """Puts each submitted event; ``submit`` returns the ack (True if new)."""

    put: Callable[[Event], bool]
    closed: bool = False
    acks: int = 0

    def submit(self, e: Event) -> bool:
        if self.closed:
            raise SinkClosed("write sink is closed")
        stored = self.put(e)
        self.acks += 1
        return stored

    def __call__(self, e: Event) -> bool:
        return self.submit(e)

    def close(self) -> None:
        self.closed = True


# -- stores ----------------------------------------------------------------

class MemoryStore:
    def __init__(self):
        self._lock = threading.RLock()
        self._index: dict[tuple, list] = {}
        self._ids: dict[str, int] = {}
        self._seq = 0
        self.counters = Counters()

    # storage primitives, overridden by the log-backed store
    def _remember(self, e: Event, ident: str) -> Any:
        return e

    def _recall(self, ref: Any) -> Event:
        return ref

    def put(self, e: Event) -> bool:
        """Store ``e``; returns False when an identical event is present."""
        _check(e)
        ident = e.identity_key()
        with self._lock:
            digest = _digest(ident)
            if digest in self._ids:
                return False
            ref = self._remember(e, ident)
            self._seq += 1
            self._ids[digest] = self._seq
            insort(self._index.setdefault(_triple(e.kind, e.name, e.key), []), (e.ts, self._seq, ref))
            return True

    def __contains__(self, e: Event) -> bool:
        with self._lock:
            return _digest(e.identity_key()) in self._ids

    def seq_of(self, e: Event) -> int | None:
        """Position of ``e`` in storage order, or None if it is not stored."""
        with self._lock:
            return self._ids.get(_digest(e.identity_key()))

    def query(self, kind: str, name: str, key: Any, before: int | None = None) -> list[Event]:
        """Events for a triple; ``before`` keeps only those stored earlier."""
        with self._lock:
            rows = list(self._index.get(_triple(kind, name, key), ()))
            return [self._recall(ref) for _, seq, ref in rows if before is None or seq < before]

    def query_prefix(self, kind: str, name: str, key: Any) -> list[Event]:
        """Events whose key is ``key`` or a compound key starting with it."""
        want = json.loads(key_json(key))
        with self._lock:
            rows = []
            for (kd, n, k), rs in self._index.items():
                if kd != kind or n != name:
                    continue
                have = json.loads(k)
                if have == want or (isinstance(have, list) and have[:1] == [want]):
                    rows.extend(rs)
            rows.sort(key=lambda r: (r[0], r[1]))
            return [self._recall(ref) for _, _, ref in rows]

    def request(self, req: dict) -> list[Event]:
        return self.query(req["kind"], req["name"], req["key"], req.get("before"))

    __call__ = request

    def keys(self, kind: str, name: str) -> list:
        with self._lock:
            return [json.loads(k) for (kd, n, k) in self._index if kd == kind and n == name]

    def scan(self, name: str, shard: int, shards: int, kind: str = "fact") -> list[Event]:
        if not 0 <= shard < shards:
            raise ValueError(f"shard {shard} out of range for {shards} shards")
        with self._lock:
            triples = [t for t in self._index if t[0] == kind and t[1] == name]
            out = []
            for t in triples:
                if fnv1a_64(t[2].encode("utf-8")) % shards == shard:
                    out.extend(self._recall(ref) for _, _, ref in self._index[t])
            return out

    def events(self) -> list[Event]:
        """All stored events in insertion order."""
        with self._lock:
            rows = sorted((seq, ref) for rs in self._index.values() for _, seq, ref in rs)
            return [self._recall(ref) for _, ref in rows]

    def __len__(self) -> int:
        with self._lock:
            return len(self._ids)

    def counter_add(self, path: str, delta: int, retries: int = 3) -> int:
        return counter_add(self.counters, path, delta, retries)

    def write_sink(self) -> WriteSink:
        return WriteSink(self.put)

    def close(self) -> None:
        pass


def _digest(ident: str) -> str:
    return hashlib.sha256(ident.encode("utf-8")).hexdigest()


_LEN = struct.Struct(">I")


class LogStore(MemoryStore):
    """Append-only log of length-prefixed canonical JSON records.

    The in-memory index holds log offsets.  Every ``snapshot_every`` puts the
    index is written to ``index.json`` together with the log length it
    covers, so reopening only replays the tail of the log.
    """

    LOG = "events.log"
    SNAPSHOT = "index.json"

    def __init__(self, root: os.PathLike | str, snapshot_every: int = 1000):
        super().__init__()
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.counters = Counters(self.root / "counters.json")
        self.snapshot_every = snapshot_every
        self._since_snapshot = 0
        self._log_path = self.root / self.LOG
        self._log_path.touch(exist_ok=True)
        self._reader = open(self._log_path, "rb")  # noqa: SIM115 - held until close()
        self._load()
        self._writer = open(self._log_path, "ab")  # noqa: SIM115 - held until close()

    def _load(self) -> None:
        offset = 0
        snap = self.root / self.SNAPSHOT
        if snap.exists():
            data = json.loads(snap.read_text())
            offset = data["offset"]
            self._seq = data["seq"]
            self._ids = dict(data["ids"])
            for row in data["index"]:
                kind, name, key, entries = row
                self._index[(kind, name, key)] = [tuple(x) for x in entries]
        size = self._log_path.stat().st_size
        self._reader.seek(offset)
        while offset < size:
            header = self._reader.read(_LEN.size)
            if len(header) < _LEN.size:
                break
            (n,) = _LEN.unpack(header)
            body = self._reader.read(n)
            if len(body) < n:
                break  # torn tail write; ignored and overwritten on next append
            e = Event.loads(body.decode("utf-8"))
            digest = _digest(e.identity_key())
            if digest not in self._ids:
                self._seq += 1
                self._ids[digest] = self._seq
                insort(self._index.setdefault(_triple(e.kind, e.name, e.key), []), (e.ts, self._seq, offset))
            offset += _LEN.size + n
        if offset < size:
            with open(self._log_path, "r+b") as f:
                f.truncate(offset)

    def _remember(self, e: Event, ident: str) -> int:
        body = ident.encode("utf-8")
        offset = self._writer.tell()
        self._writer.write(_LEN.pack(len(body)) + body)
        self._writer.flush()
        self._since_snapshot += 1
        return offset

    def put(self, e: Event) -> bool:
        stored = super().put(e)
        if stored and self._since_snapshot >= self.snapshot_every:
            self.snapshot()
        return stored

    def _recall(self, offset: int) -> Event:
        self._reader.seek(offset)
        (n,) = _LEN.unpack(self._reader.read(_LEN.size))
        return Event.loads(self._reader.read(n).decode("utf-8"))

    def snapshot(self) -> None:
        with self._lock:
            self._writer.flush()
            os.fsync(self._writer.fileno())
            data = {
                "offset": self._writer.tell(),
                "seq": self._seq,
                "ids": self._ids,
                "index": [[k, n, key, rows] for (k, n, key), rows in self._index.items()],
            }
            tmp = self.root / (self.SNAPSHOT + ".tmp")
            tmp.write_text(canonical_json(data))
            os.replace(tmp, self.root / self.SNAPSHOT)
            self._since_snapshot = 0

    def close(self) -> None:
        with self._lock:
            if self._writer.closed:
                return
            self.snapshot()
            self._writer.close()
            self._reader.close()


def open_store(path: os.PathLike | str | None = None) -> MemoryStore:
    """A log-backed store under ``path`` (or ``$MIP_DATA_DIR``), else in-memory."""
    path = path or os.environ.get("MIP_DATA_DIR")
    return LogStore(path) if path else MemoryStore()


def iter_log(path: os.PathLike | str) -> Iterator[Event]:
    with open(path, "rb") as f:
        while header := f.read(_LEN.size):
            (n,) = _LEN.unpack(header)
            yield Event.loads(f.read(n).decode("utf-8"))
