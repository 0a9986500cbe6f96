"""External key/value memory.

Keys live in the query embedding space and are L2-normalized on insertion so
that cosine similarity is a plain dot product. Values come from a (possibly
different) encoder and are kept exactly as given.

On disk a store is a single little-endian "RACM" file::

    magic "RACM" | u32 version=1 | u32 key_dim | u32 value_dim | u64 count
    keys   float32[count, key_dim]   (row-major)
    values float32[count, value_dim] (row-major)
    count x (u32 nbytes | UTF-8 JSON {"source_tag": str, "class_hint": int|null})
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from ._binio import (
    FormatError,
    Reader,
    le_bytes,
    pack_u32,
    pack_u64,
    read_file,
)

MAGIC = b"RACM"
VERSION = 1


@dataclass(frozen=True)
class MetaRecord:
    source_tag: str
    class_hint: Optional[int] = None

    def to_json(self) -> str:
        return json.dumps(
            {"source_tag": self.source_tag, "class_hint": self.class_hint},
            sort_keys=True,
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, text: str) -> "MetaRecord":
        obj = json.loads(text)
        hint = obj.get("class_hint")
        return cls(str(obj["source_tag"]), None if hint is None else int(hint))


def _as_meta(m) -> MetaRecord:
    if isinstance(m, MetaRecord):
        return m
    if isinstance(m, dict):
        return MetaRecord(m["source_tag"], m.get("class_hint"))
    raise TypeError(f"unsupported metadata record {m!r}")


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """Return float32 unit rows; norms are computed in float64."""
    x64 = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x64, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-norm vector cannot be normalized")
    return (x64 / norms).astype(np.float32)


class MemoryStore:
    """Row-aligned key/value matrices plus per-row metadata.

    Rows are only ever appended. ``keys`` and ``values`` return views of the
    filled part of internal buffers that grow geometrically.
    """

    def __init__(self, key_dim: int, value_dim: int):
        if key_dim < 1:
            raise ValueError(f"key_dim must be >= 1, got {key_dim}")
        if value_dim < 0:
            raise ValueError(f"value_dim must be >= 0, got {value_dim}")
        self.key_dim = int(key_dim)
        self.value_dim = int(value_dim)
        self._keys = np.empty((0, self.key_dim), dtype=np.float32)
        self._values = np.empty((0, self.value_dim), dtype=np.float32)
        self._count = 0
        self.meta: list[MetaRecord] = []

    @property
    def count(self) -> int:
        return self._count

    def __len__(self) -> int:
        return self._count

    @property
    def keys(self) -> np.ndarray:
        return self._keys[: self._count]

    @property
    def values(self) -> np.ndarray:
        return self._values[: self._count]

    def __repr__(self) -> str:
        return f"MemoryStore(count={self.count}, key_dim={self.key_dim}, value_dim={self.value_dim})"

    def _reserve(self, extra: int) -> None:
        need = self._count + extra
        cap = self._keys.shape[0]
        if need <= cap:
            return
        new_cap = max(need, 2 * cap, 16)
        keys = np.empty((new_cap, self.key_dim), dtype=np.float32)
        values = np.empty((new_cap, self.value_dim), dtype=np.float32)
        keys[: self._count] = self._keys[: self._count]
        values[: self._count] = self._values[: self._count]
        self._keys, self._values = keys, values

    def append(self, key, value, meta) -> int:
        """Add one row and return its id."""
        key = np.asarray(key, dtype=np.float64).reshape(-1)
        value = np.asarray(value, dtype=np.float64).reshape(-1)
        self.extend(key[None, :], value[None, :], [meta])
        return self._count - 1

    def extend(self, keys, values, meta: Iterable) -> np.ndarray:
        """Bulk append; returns the ids of the new rows."""
        keys = np.asarray(keys)
        values = np.asarray(values)
        meta = [_as_meta(m) for m in meta]
        if keys.ndim != 2 or keys.shape[1] != self.key_dim:
            raise ValueError(f"keys must have shape (n, {self.key_dim}), got {keys.shape}")
        n = keys.shape[0]
        if values.ndim != 2 or values.shape != (n, self.value_dim):
            raise ValueError(f"values must have shape ({n}, {self.value_dim}), got {values.shape}")
        if len(meta) != n:
            raise ValueError(f"expected {n} metadata records, got {len(meta)}")
        if not (np.all(np.isfinite(keys)) and np.all(np.isfinite(values))):
            raise ValueError("non-finite entry in key or value")
        unit = normalize_rows(keys)
        self._reserve(n)
        start = self._count
        self._keys[start:start + n] = unit
        self._values[start:start + n] = values.astype(np.float32)
        self._count += n
        self.meta.extend(meta)
        return np.arange(start, start + n)

    def key_digest(self) -> bytes:
        """SHA-256 over dims and key bytes; identifies the searchable content."""
        h = hashlib.sha256()
        h.update(pack_u32(self.key_dim) + pack_u64(self.count))
        h.update(le_bytes(self.keys, "f4"))
        return h.digest()

    def equals(self, other: "MemoryStore") -> bool:
        """Field-for-field equality, comparing float bit patterns."""
        return (
            self.key_dim == other.key_dim
            and self.value_dim == other.value_dim
            and self.count == other.count
            and self.keys.tobytes() == other.keys.tobytes()
            and self.values.tobytes() == other.values.tobytes()
            and self.meta == other.meta
        )


def create_store(key_dim: int, value_dim: int) -> MemoryStore:
    if key_dim < 1 or value_dim < 1:
        raise ValueError(f"dimensions must be >= 1, got ({key_dim}, {value_dim})")
    return MemoryStore(key_dim, value_dim)


def _from_unit_arrays(keys: np.ndarray, values: np.ndarray, meta: list[MetaRecord]) -> MemoryStore:
    # keys are already normalized float32; copy them bit-for-bit
    store = MemoryStore(keys.shape[1], values.shape[1])
    store._keys = np.array(keys, dtype=np.float32, copy=True)
    store._values = np.array(values, dtype=np.float32, copy=True)
    store._count = keys.shape[0]
    store.meta = list(meta)
    return store


def merge(a: MemoryStore, b: MemoryStore) -> MemoryStore:
    """New store holding a's rows followed by b's rows."""
    if a.key_dim != b.key_dim or a.value_dim != b.value_dim:
        raise ValueError(
            f"cannot merge stores with dims ({a.key_dim}, {a.value_dim}) and ({b.key_dim}, {b.value_dim})"
        )
    return _from_unit_arrays(
        np.concatenate([a.keys, b.keys]),
        np.concatenate([a.values, b.values]),
        a.meta + b.meta,
    )


def write_store(store: MemoryStore, path) -> None:
    parts = [
        MAGIC,
        pack_u32(VERSION),
        pack_u32(store.key_dim),
        pack_u32(store.value_dim),
        pack_u64(store.count),
        le_bytes(store.keys, "f4"),
        le_bytes(store.values, "f4"),
    ]
    for m in store.meta:
        raw = m.to_json().encode("utf-8")
        parts.append(pack_u32(len(raw)))
        parts.append(raw)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_store(path) -> MemoryStore:
    r = Reader(read_file(path), str(path))
    r.expect_header(MAGIC, VERSION)
    key_dim = r.u32()
    value_dim = r.u32()
    count = r.u64()
    if key_dim < 1:
        raise FormatError(f"{path}: key_dim must be >= 1")
    keys = r.array("f4", (count, key_dim))
    values = r.array("f4", (count, value_dim))
    meta = []
    for _ in range(count):
        n = r.u32()
        meta.append(MetaRecord.from_json(r.take(n).decode("utf-8")))
    if not r.at_end():
        raise FormatError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return _from_unit_arrays(keys, values, meta)
