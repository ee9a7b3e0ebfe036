"""Versioned key-value store for specs, object metadata, and graphs.

Four record kinds exist: ``class`` and ``function`` hold registered specs
(read-mostly, served through an in-memory cache), ``object`` and ``graph``
hold mutable coordination state and are never cached. Writes are per-key
atomic with optional compare-and-set on the version, which is what lets
stateless components race safely on status transitions.

Values are canonical JSON: normalized on write (sorted keys, no
whitespace) and value-copied on every read, so callers never share
mutable structures with the store.
"""

from __future__ import annotations

import json
import os
import time
import threading
import zlib
from dataclasses import dataclass
from typing import Any, Callable

from .errors import CorruptSnapshot, NotFound, StorageError, VersionConflict

KINDS = ("class", "function", "object", "graph")
SPEC_KINDS = ("class", "function")

SNAPSHOT_HEADER = "OAAS-KV 1"

# hook(kind, key, old_record_or_none, new_value) -> None; may raise to veto.
WriteHook = Callable[[str, str, "Record | None", Any], None]


@dataclass
class Record:
    kind: str
    key: str
    value: Any
    version: int


class MetadataStore:
    """Thread-safe in-process store with a read-through cache for spec kinds.

    ``cache_ttl`` bounds staleness when an external writer shares the
    backing data; in a single-process deployment local writes invalidate
    the cache directly, so the default is no expiry.
    """

    def __init__(self, cache_enabled: bool = True, cache_ttl: float | None = None):
        self._lock = threading.RLock()
        self._data: dict[tuple[str, str], tuple[str, int]] = {}
        self._cache: dict[tuple[str, str], tuple[str, int, float]] = {}
        self._cache_enabled = cache_enabled
        self._cache_ttl = cache_ttl
        self._write_hooks: list[WriteHook] = []
        self._reads_by_kind: dict[str, int] = {k: 0 for k in KINDS}

    # -- instrumentation ----------------------------------------------------

    def add_write_hook(self, hook: WriteHook) -> None:
        with self._lock:
            self._write_hooks.append(hook)

    def remove_write_hook(self, hook: WriteHook) -> None:
        with self._lock:
            self._write_hooks.remove(hook)

    def backing_reads(self, *kinds: str) -> int:
        """Physical reads observed, summed over the given kinds (all if none)."""
        with self._lock:
            if not kinds:
                kinds = KINDS
            return sum(self._reads_by_kind[k] for k in kinds)

    def reset_read_counters(self) -> None:
        with self._lock:
            self._reads_by_kind = {k: 0 for k in KINDS}

    # -- core operations ----------------------------------------------------

    def put(self, kind: str, key: str, value: Any, expected_version: int | None = None) -> int:
        """Write a record, returning the new version.

        Without ``expected_version`` this is create-or-overwrite. With it,
        the write succeeds only when it matches the current version
        (0 means "create only if absent"); otherwise VersionConflict
        carries the version now in force.
        """
        _check_kind(kind)
        try:
            encoded = json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        except (TypeError, ValueError) as exc:
            raise StorageError(f"value for {kind}/{key} is not JSON-serializable: {exc}") from exc
        with self._lock:
            existing = self._data.get((kind, key))
            current = existing[1] if existing else 0
            if expected_version is not None and expected_version != current:
                raise VersionConflict(current)
            old = None
            if existing is not None:
                old = Record(kind, key, json.loads(existing[0]), existing[1])
            for hook in self._write_hooks:
                hook(kind, key, old, json.loads(encoded))
            new_version = current + 1
            self._data[(kind, key)] = (encoded, new_version)
            self._cache.pop((kind, key), None)
            return new_version

    def get(self, kind: str, key: str) -> Record:
        _check_kind(kind)
        with self._lock:
            entry = self._data.get((kind, key))
            if entry is None:
                raise NotFound(f"{kind}/{key}")
            self._reads_by_kind[kind] += 1
            return Record(kind, key, json.loads(entry[0]), entry[1])

    def get_or_none(self, kind: str, key: str) -> Record | None:
        try:
            return self.get(kind, key)
        except NotFound:
            return None

    def get_spec_cached(self, kind: str, key: str) -> Record:
        """Read a spec record through the cache.

        Only spec kinds are cacheable; object and graph records mutate and
        always hit the backing store. A local put invalidates the entry, so
        a cached read never trails a local write.
        """
        if kind not in SPEC_KINDS:
            raise ValueError(f"kind {kind!r} is not cacheable")
        if not self._cache_enabled:
            return self.get(kind, key)
        with self._lock:
            entry = self._cache.get((kind, key))
            if entry is not None:
                encoded, version, cached_at = entry
                if self._cache_ttl is None or time.monotonic() - cached_at <= self._cache_ttl:
                    return Record(kind, key, json.loads(encoded), version)
            record = self.get(kind, key)  # counted backing read
            raw = self._data[(kind, key)][0]
            self._cache[(kind, key)] = (raw, record.version, time.monotonic())
            return record

    def invalidate(self, kind: str, key: str) -> None:
        with self._lock:
            self._cache.pop((kind, key), None)

    def list_keys(self, kind: str, prefix: str = "") -> list[str]:
        _check_kind(kind)
        with self._lock:
            return sorted(k for (kd, k) in self._data if kd == kind and k.startswith(prefix))

    def key_count(self) -> int:
        with self._lock:
            return len(self._data)

    # -- snapshots ------------------------------------------------------------

    def snapshot_save(self, path: str) -> None:
        """Write all records to ``path``; format is a header line, one JSON
        object per record, and a CRC32 trailer over all preceding bytes."""
        with self._lock:
            rows = [
                {"kind": kind, "key": key, "version": version, "value": json.loads(encoded)}
                for (kind, key), (encoded, version) in sorted(self._data.items())
            ]
        body = SNAPSHOT_HEADER + "\n"
        for row in rows:
            body += json.dumps(row, sort_keys=True, separators=(",", ":"), ensure_ascii=False) + "\n"
        crc = zlib.crc32(body.encode("utf-8")) & 0xFFFFFFFF
        body += f"CRC32 {crc:08x}\n"
        tmp = f"{path}.tmp.{os.getpid()}"
        try:
            with open(tmp, "w", encoding="utf-8") as fh:
                fh.write(body)
            os.replace(tmp, path)
        except OSError as exc:
            raise StorageError(f"cannot write snapshot: {exc}") from exc

    def snapshot_load(self, path: str) -> None:
        """Replace store contents from a snapshot file."""
        try:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise StorageError(f"cannot read snapshot: {exc}") from exc
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if len(lines) < 2 or lines[0] != SNAPSHOT_HEADER:
            raise CorruptSnapshot("missing header")
        trailer = lines[-1]
        if not trailer.startswith("CRC32 "):
            raise CorruptSnapshot("missing checksum trailer")
        preceding = "\n".join(lines[:-1]) + "\n"
        expected = trailer[len("CRC32 ") :].strip()
        actual = f"{zlib.crc32(preceding.encode('utf-8')) & 0xFFFFFFFF:08x}"
        if actual != expected:
            raise CorruptSnapshot(f"checksum mismatch: {actual} != {expected}")
        data: dict[tuple[str, str], tuple[str, int]] = {}
        for i, line in enumerate(lines[1:-1], start=2):
            try:
                row = json.loads(line)
                kind, key = row["kind"], row["key"]
                version = int(row["version"])
                encoded = json.dumps(
                    row["value"], sort_keys=True, separators=(",", ":"), ensure_ascii=False
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise CorruptSnapshot(f"bad record at line {i}: {exc}") from exc
            data[(kind, key)] = (encoded, version)
        with self._lock:
            self._data = data
            self._cache.clear()


def _check_kind(kind: str) -> None:
    if kind not in KINDS:
        raise ValueError(f"unknown record kind {kind!r}")
