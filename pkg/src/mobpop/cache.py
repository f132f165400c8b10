"""Content-addressed result cache for pipeline operations.

A cache key digests the operation name, the configuration subset that can
change its outputs, and the content hash of every input file, so a hit is
only possible when a fresh run would produce byte-identical outputs.
Entries store copies of the output files (or directories); restoring a hit
copies them back verbatim. Access is serialized by a directory lock.
"""

from __future__ import annotations

import hashlib
import json
import shutil
import time
from dataclasses import dataclass
from pathlib import Path

from filelock import FileLock

from . import __version__
from .errors import InputError

_METADATA = "metadata.json"


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def tree_digest(path) -> str:
    """Content hash of a file, or of a directory's (name, hash) listing."""
    path = Path(path)
    if path.is_dir():
        h = hashlib.sha256()
        for child in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(str(child.relative_to(path)).encode())
            h.update(file_digest(child).encode())
        return h.hexdigest()
    if path.is_file():
        return file_digest(path)
    raise InputError(f"cannot hash missing input: {path}")


@dataclass(frozen=True)
class CacheEntry:
    key: str
    path: Path
    outputs: dict[str, str]


class ResultCache:
    def __init__(self, cache_dir):
        self.root = Path(cache_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = FileLock(str(self.root / ".lock"))

    def key(self, operation: str, config: dict, inputs: dict[str, Path]) -> str:
        payload = {
            "operation": operation,
            "config": config,
            "inputs": {name: tree_digest(p) for name, p in sorted(inputs.items())},
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def lookup(self, key: str) -> CacheEntry | None:
        entry_dir = self.root / key
        meta_path = entry_dir / _METADATA
        with self._lock:
            if not meta_path.exists():
                return None
            meta = json.loads(meta_path.read_text())
        return CacheEntry(key, entry_dir, meta["outputs"])

    def store(self, key: str, operation: str, outputs: dict[str, Path]) -> CacheEntry:
        entry_dir = self.root / key
        with self._lock:
            if entry_dir.exists():
                shutil.rmtree(entry_dir)
            entry_dir.mkdir(parents=True)
            stored = {}
            for name, src in sorted(outputs.items()):
                src = Path(src)
                dest = entry_dir / name
                if src.is_dir():
                    shutil.copytree(src, dest)
                else:
                    shutil.copy2(src, dest)
                stored[name] = name
            meta = {"operation": operation, "tool_version": __version__,
                    "timestamp": time.time(), "outputs": stored}
            # metadata written last: its presence marks the entry complete
            (entry_dir / _METADATA).write_text(json.dumps(meta, indent=2))
        return CacheEntry(key, entry_dir, stored)

    def restore(self, entry: CacheEntry, destinations: dict[str, Path]) -> None:
        with self._lock:
            for name, dest in sorted(destinations.items()):
                src = entry.path / entry.outputs[name]
                dest = Path(dest)
                dest.parent.mkdir(parents=True, exist_ok=True)
                if src.is_dir():
                    if dest.exists():
                        shutil.rmtree(dest)
                    shutil.copytree(src, dest)
                else:
                    shutil.copy2(src, dest)
