"""Content-addressed storage of rule modules and static blobs.

Modules are JSON documents ``{module_name, imports, rules}``.  Publishing a
set of modules hashes them leaves-first, rewriting each module's imports
(and any fact names qualified by an imported module) to the imports'
PermRefs, so a module's ref pins its whole dependency tree.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import threading
from collections.abc import Iterable, Mapping
from graphlib import CycleError, TopologicalSorter
from pathlib import Path
from typing import Any

from .events import canonical_json
from .expr import WHITELIST, operators
from .rules import RuleDef, validate_rule

PERM = "perm"
STATIC = "static"


class NotFound(KeyError):
    pass


class ImpureSymbols(ValueError):
    def __init__(self, symbols: Iterable[str]):
        self.symbols = frozenset(symbols)
        super().__init__(f"symbols {sorted(self.symbols)} are not allowed")


class ImportCycle(ValueError):
    pass


class UnknownImport(ValueError):
    pass


def is_ref(name: str) -> bool:
    return name.startswith((PERM + ".", STATIC + "."))


def _digest(content: bytes) -> str:
    return base64.b32encode(hashlib.sha256(content).digest()).decode("ascii").rstrip("=").lower()


def canonical_bytes(obj: Any) -> bytes:
    return canonical_json(obj).encode("utf-8")


# -- blob backends ---------------------------------------------------------

class MemoryBlobs:
    def __init__(self):
        self._blobs: dict[str, bytes] = {}
        self._lock = threading.Lock()

    def put(self, digest: str, content: bytes) -> None:
        with self._lock:
            self._blobs.setdefault(digest, content)

    def get(self, digest: str) -> bytes | None:
        with self._lock:
            return self._blobs.get(digest)


class DirBlobs:
    """Blobs under ``root/<first two chars>/<rest of digest>``."""

    def __init__(self, root: os.PathLike | str):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, digest: str) -> Path:
        return self.root / digest[:2] / digest[2:]

    def put(self, digest: str, content: bytes) -> None:
        path = self._path(digest)
        if path.exists():
            return
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + f".{os.getpid()}.{threading.get_ident()}.tmp")
        tmp.write_bytes(content)
        os.replace(tmp, path)

    def get(self, digest: str) -> bytes | None:
        path = self._path(digest)
        return path.read_bytes() if path.exists() else None


class Hasher:
    def __init__(self, blobs=None):
        self.blobs = blobs if blobs is not None else MemoryBlobs()
        self._modules: dict[str, dict] = {}
        self._lock = threading.Lock()

    def hash(self, content: bytes, prefix: str = PERM) -> str:
        digest = _digest(content)
        self.blobs.put(digest, content)
        return f"{prefix}.{digest}"

    def unhash(self, ref: str) -> bytes:
        prefix, _, digest = ref.partition(".")
        content = self.blobs.get(digest) if prefix in (PERM, STATIC) and digest else None
        if content is None:
            raise NotFound(f"no such ref: {ref}")
        return content

    # -- modules -------------------------------------------------------

    def module_publics(self, ref: str) -> dict[str, RuleDef]:
        with self._lock:
            cached = self._modules.get(ref)
        if cached is not None:
            return cached
        module = json.loads(self.unhash(ref))
        validate_pure(module)
        publics = {}
        for obj in module.get("rules", ()):
            r = validate_rule(RuleDef.from_json(obj, ns=ref))
            publics[r.short_name] = r
        with self._lock:
            self._modules[ref] = publics
        return publics

    def eval_symbol(self, qualified: str) -> RuleDef:
        ref, _, name = qualified.partition("/")
        publics = self.module_publics(ref)
        if name not in publics:
            raise NotFound(f"{ref} has no definition {name!r}")
        return publics[name]


# -- purity ------------------------------------------------------------------

def _rule_expressions(rule: Mapping) -> Iterable[Any]:
    for link in rule.get("links", ()):
        yield link.get("key")
        yield from link.get("args", ())
        yield from link.get("guards", ())
    out = rule.get("output", {})
    yield out.get("key")
    yield from out.get("args", ())


def validate_pure(module: Mapping) -> Mapping:
    bad: set[str] = set()
    for rule in module.get("rules", ()):
        for expr in _rule_expressions(rule):
            if isinstance(expr, list) and expr and expr[0] in ("let", "for"):
                for _, value in expr[1]:
                    bad.update(op for op in operators(value) if op not in WHITELIST)
                continue
            bad.update(op for op in operators(expr) if op not in WHITELIST)
    if bad:
        raise ImpureSymbols(bad)
    return module


# -- publishing --------------------------------------------------------------

def _rewrite_name(name: str, refs: Mapping[str, str]) -> str:
    ns, sep, rest = name.partition("/")
    if sep and ns in refs:
        return f"{refs[ns]}/{rest}"
    return name


def _rewrite(module: Mapping, refs: Mapping[str, str]) -> dict:
    out = json.loads(json.dumps(module))
    out["imports"] = [refs.get(i, i) for i in module.get("imports", ())]
    for rule in out.get("rules", ()):
        for link in rule.get("links", ()):
            link["fact"] = _rewrite_name(link["fact"], refs)
        if "fact" in rule.get("output", {}):
            rule["output"]["fact"] = _rewrite_name(rule["output"]["fact"], refs)
    return out


def hash_all(hasher: Hasher, modules: Iterable[Mapping]) -> dict[str, str]:
    """Publish ``modules``; returns module name to PermRef."""
    by_name = {m["module_name"]: m for m in modules}
    graph = {}
    for name, m in by_name.items():
        validate_pure(m)
        deps = []
        for imp in m.get("imports", ()):
            if is_ref(imp):
                continue
            if imp not in by_name:
                raise UnknownImport(f"{name} imports unknown module {imp}")
            deps.append(imp)
        graph[name] = deps
    try:
        order = list(TopologicalSorter(graph).static_order())
    except CycleError as exc:
        raise ImportCycle(f"import cycle: {exc.args[1]}") from None
    refs: dict[str, str] = {}
    for name in order:
        refs[name] = hasher.hash(canonical_bytes(_rewrite(by_name[name], refs)))
    return dict(sorted(refs.items()))


def load_modules(src: os.PathLike | str) -> list[dict]:
    """Every ``*.json`` rule module under ``src``."""
    return [json.loads(p.read_text("utf-8")) for p in sorted(Path(src).rglob("*.json"))]


def hash_static_files(hasher: Hasher, root: os.PathLike | str) -> dict[str, str]:
    root = Path(root)
    if not root.exists():
        return {}
    out = {}
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        rel = "/" + path.relative_to(root).as_posix()
        out[rel] = hasher.hash(path.read_bytes(), prefix=STATIC)
    return out
