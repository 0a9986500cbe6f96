"""Top-k cosine search over memory keys.

Two index types share one scoring and ranking path so their results can be
compared id-for-id:

* :class:`ExactIndex` scans every key (the oracle).
* :class:`IvfIndex` partitions keys with spherical k-means and scans only the
  ``n_probe`` partitions whose centroids score highest against the query.

Scores are dot products of the normalized query with unit keys, accumulated in
float64 and rounded to float32. Results are ordered by descending score; equal
float32 scores are ordered by ascending id.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from ._binio import (
    FormatError,
    Reader,
    le_bytes,
    pack_u32,
    pack_u64,
    read_file,
)
from .store import MemoryStore, normalize_rows

log = logging.getLogger(__name__)

ALL = "all"
NProbe = Union[int, str, None]

_KEY_CHUNK = 16384
_QUERY_BLOCK = 256


class StaleCacheError(Exception):
    """A k-NN cache does not match the index/queries/k it is used with."""


def _normalize_query(q, dim: int) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.shape[0] != dim:
        raise ValueError(f"query has length {q.shape[0]}, index expects {dim}")
    if not np.all(np.isfinite(q)):
        raise ValueError("query has non-finite entries")
    norm = np.linalg.norm(q)
    if norm == 0:
        raise ValueError("zero-norm query")
    return q / norm


def _normalize_queries(Q, dim: int) -> np.ndarray:
    Q = np.asarray(Q, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[1] != dim:
        raise ValueError(f"queries must have shape (n, {dim}), got {Q.shape}")
    if not np.all(np.isfinite(Q)):
        raise ValueError("queries have non-finite entries")
    norms = np.linalg.norm(Q, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-norm query")
    return Q / norms


def _scores(keys: np.ndarray, q64: np.ndarray) -> np.ndarray:
    """float32 scores of unit ``keys`` (n, d) against one normalized query."""
    return (keys.astype(np.float64) @ q64).astype(np.float32)


def topk(scores: np.ndarray, ids: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Best ``k`` (id, score) pairs by descending score, ties by ascending id.

    Entries scored ``-inf`` are treated as unreachable and never returned.
    """
    valid = scores > -np.inf
    if not np.all(valid):
        scores, ids = scores[valid], ids[valid]
    n = scores.shape[0]
    if n > k:
        thr = -np.partition(-scores, k - 1)[k - 1]
        keep = np.nonzero(scores >= thr)[0]
        scores, ids = scores[keep], ids[keep]
    order = np.lexsort((ids, -scores))[:k]
    return ids[order].astype(np.int64), scores[order]


class ExactIndex:
    """Brute-force search. Holds a view of the store's keys, never a copy."""

    kind = "exact"

    def __init__(self, store: MemoryStore):
        if store.count < 1:
            raise ValueError("cannot index an empty store")
        self.store = store
        self.keys = store.keys
        self.dim = store.key_dim

    @property
    def count(self) -> int:
        return self.keys.shape[0]

    def descriptor(self) -> bytes:
        return b"exact"

    def resolve_n_probe(self, n_probe: NProbe) -> int:
        return 0

    def query(self, q, k: int, n_probe: NProbe = None, exclude_id: Optional[int] = None):
        """Top-k of a single query as a list of ``(id, score)`` tuples."""
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        q64 = _normalize_query(q, self.dim)
        s = _scores(self.keys, q64)
        if exclude_id is not None and 0 <= exclude_id < s.shape[0]:
            s[exclude_id] = -np.inf
        ids, sc = topk(s, np.arange(s.shape[0]), k)
        return [(int(i), float(v)) for i, v in zip(ids, sc)]

    def search(self, Q, k: int, n_probe: NProbe = None, exclude_ids=None):
        """Batched top-k. Returns ``(ids, scores)`` of shape (n, min(k, reachable)).

        ``exclude_ids`` optionally gives one id per query to leave out (-1 for none).
        """
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        Q64 = _normalize_queries(Q, self.dim)
        nq, n = Q64.shape[0], self.count
        width = min(k, n - (1 if exclude_ids is not None else 0))
        out_ids = np.empty((nq, width), dtype=np.int64)
        out_sc = np.empty((nq, width), dtype=np.float32)
        all_ids = np.arange(n)
        for qs in range(0, nq, _QUERY_BLOCK):
            qb = Q64[qs:qs + _QUERY_BLOCK]
            S = np.empty((qb.shape[0], n), dtype=np.float32)
            for ks in range(0, n, _KEY_CHUNK):
                chunk = self.keys[ks:ks + _KEY_CHUNK].astype(np.float64)
                S[:, ks:ks + chunk.shape[0]] = (qb @ chunk.T).astype(np.float32)
            for r in range(qb.shape[0]):
                row = S[r]
                if exclude_ids is not None:
                    ex = int(exclude_ids[qs + r])
                    if 0 <= ex < n:
                        row[ex] = -np.inf
                ids, sc = topk(row, all_ids, width)
                if ids.shape[0] < width:
                    raise ValueError("fewer reachable neighbors than requested")
                out_ids[qs + r] = ids
                out_sc[qs + r] = sc
        return out_ids, out_sc


def build_exact(store: MemoryStore) -> ExactIndex:
    return ExactIndex(store)


def _assign(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest (highest cosine) centroid per row; ties go to the lower index."""
    out = np.empty(x.shape[0], dtype=np.int64)
    ct = centroids.T
    for s in range(0, x.shape[0], _KEY_CHUNK):
        out[s:s + _KEY_CHUNK] = np.argmax(x[s:s + _KEY_CHUNK] @ ct, axis=1)
    return out


def _kmeanspp(x: np.ndarray, n_lists: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    # squared chord distance between unit vectors: 2 - 2 cos
    d2 = np.maximum(2.0 - 2.0 * (x @ x[chosen[0]]).astype(np.float64), 0.0)
    for _ in range(1, n_lists):
        total = d2.sum()
        if total <= 0:
            # every point coincides with a chosen centre; fall back to unused rows
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rest[rng.integers(rest.shape[0])])
        else:
            cdf = np.cumsum(d2)
            nxt = int(np.searchsorted(cdf, rng.random() * total, side="right"))
            nxt = min(nxt, n - 1)
        chosen.append(nxt)
        d2 = np.minimum(d2, np.maximum(2.0 - 2.0 * (x @ x[nxt]).astype(np.float64), 0.0))
    return x[chosen].astype(np.float64)


def spherical_kmeans(x: np.ndarray, n_lists: int, seed: int, max_iters: int = 25):
    """Cosine k-means with k-means++ seeding.

    Args:
        x: (n, d) float32 unit rows.
        n_lists: number of centroids.
        seed: generator seed; output is a pure function of (x, n_lists, seed, max_iters).
        max_iters: Lloyd iterations cap; stops early when assignments repeat.

    Returns:
        (centroids float32 (n_lists, d) unit rows, assignment int64 (n,))
    """
    rng = np.random.default_rng(seed)
    n, d = x.shape
    centroids = _kmeanspp(x, n_lists, rng)
    prev = None
    for it in range(max_iters):
        assign = _assign(x, centroids.astype(np.float32))
        if prev is not None and np.array_equal(assign, prev):
            log.debug("k-means converged after %d iterations", it)
            break
        prev = assign
        sums = np.stack(
            [np.bincount(assign, weights=x[:, j], minlength=n_lists) for j in range(d)],
            axis=1,
        )
        norms = np.linalg.norm(sums, axis=1)
        live = norms > 0
        centroids[live] = sums[live] / norms[live, None]
    centroids = normalize_rows(centroids)
    return centroids, _assign(x, centroids)


def default_n_lists(count: int) -> int:
    return int(min(max(round(math.sqrt(count)), 1), count))


def default_n_probe(n_lists: int) -> int:
    return max(1, n_lists // 16)


class IvfIndex:
    """Inverted-file index: one posting list of ids per k-means centroid."""

    kind = "ivf"

    def __init__(self, store: MemoryStore, centroids: np.ndarray, assignment: np.ndarray,
                 seed: int, max_kmeans_iters: int):
        self.store = store
        self.keys = store.keys
        self.dim = store.key_dim
        self.centroids = np.ascontiguousarray(centroids, dtype=np.float32)
        self.n_lists = self.centroids.shape[0]
        self.assignment = np.asarray(assignment, dtype=np.int64)
        self.seed = int(seed)
        self.max_kmeans_iters = int(max_kmeans_iters)
        order = np.argsort(self.assignment, kind="stable")
        sizes = np.bincount(self.assignment, minlength=self.n_lists)
        self.postings = np.split(order, np.cumsum(sizes)[:-1])

    @property
    def count(self) -> int:
        return self.keys.shape[0]

    def descriptor(self) -> bytes:
        h = hashlib.sha256(le_bytes(self.centroids, "f4")).hexdigest()
        return f"ivf:{self.n_lists}:{self.seed}:{self.max_kmeans_iters}:{h}".encode()

    def resolve_n_probe(self, n_probe: NProbe) -> int:
        if n_probe is None:
            return default_n_probe(self.n_lists)
        if n_probe == ALL:
            return self.n_lists
        n_probe = int(n_probe)
        if n_probe < 1:
            raise ValueError(f"n_probe must be >= 1, got {n_probe}")
        return min(n_probe, self.n_lists)

    def _candidates(self, q64: np.ndarray, n_probe: int) -> np.ndarray:
        cs = self.centroids.astype(np.float64) @ q64
        lists = np.lexsort((np.arange(self.n_lists), -cs))[:n_probe]
        parts = [self.postings[i] for i in lists if self.postings[i].shape[0]]
        if not parts:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(parts)

    def _query_arrays(self, q64, k, n_probe, exclude_id):
        cand = self._candidates(q64, n_probe)
        if exclude_id is not None and exclude_id >= 0:
            cand = cand[cand != exclude_id]
        s = _scores(self.keys[cand], q64)
        return topk(s, cand, k)

    def query(self, q, k: int, n_probe: NProbe = None, exclude_id: Optional[int] = None):
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        q64 = _normalize_query(q, self.dim)
        ids, sc = self._query_arrays(q64, k, self.resolve_n_probe(n_probe), exclude_id)
        return [(int(i), float(v)) for i, v in zip(ids, sc)]

    def search(self, Q, k: int, n_probe: NProbe = None, exclude_ids=None):
        """Batched top-k; raises if any query reaches fewer than min(k, count) ids."""
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        Q64 = _normalize_queries(Q, self.dim)
        probe = self.resolve_n_probe(n_probe)
        width = min(k, self.count - (1 if exclude_ids is not None else 0))
        out_ids = np.empty((Q64.shape[0], width), dtype=np.int64)
        out_sc = np.empty((Q64.shape[0], width), dtype=np.float32)
        for i, q64 in enumerate(Q64):
            ex = None if exclude_ids is None else int(exclude_ids[i])
            ids, sc = self._query_arrays(q64, width, probe, ex)
            if ids.shape[0] < width:
                raise ValueError(
                    f"query {i} reached only {ids.shape[0]} of {width} neighbors; raise n_probe"
                )
            out_ids[i] = ids
            out_sc[i] = sc
        return out_ids, out_sc


def build_ivf(store: MemoryStore, n_lists: Optional[int] = None, seed: int = 0,
              max_kmeans_iters: int = 25) -> IvfIndex:
    """Spherical k-means over the store keys, then posting lists by nearest centroid."""
    if store.count < 1:
        raise ValueError("cannot index an empty store")
    if n_lists is None:
        n_lists = default_n_lists(store.count)
    if n_lists < 1:
        raise ValueError("n_lists must be >= 1")
    if n_lists > store.count:
        raise ValueError(f"n_lists={n_lists} exceeds store count {store.count}")
    centroids, assign = spherical_kmeans(store.keys, n_lists, seed, max_kmeans_iters)
    return IvfIndex(store, centroids, assign, seed, max_kmeans_iters)


def recall_at_k(approx, exact) -> float:
    """Fraction of the exact result ids that the approximate result recovered."""
    a = [p[0] if isinstance(p, tuple) else int(p) for p in approx]
    e = [p[0] if isinstance(p, tuple) else int(p) for p in exact]
    if len(a) != len(e):
        raise ValueError(f"result lists differ in length: {len(a)} vs {len(e)}")
    if not e:
        raise ValueError("empty result lists")
    return len(set(a) & set(e)) / len(e)


# --- IVF persistence -------------------------------------------------------

IVF_MAGIC = b"RACI"
IVF_VERSION = 1


def write_ivf(index: IvfIndex, path) -> None:
    parts = [
        IVF_MAGIC,
        pack_u32(IVF_VERSION),
        pack_u32(index.n_lists),
        pack_u32(index.dim),
        pack_u64(index.count),
        pack_u64(index.seed),
        pack_u32(index.max_kmeans_iters),
        index.store.key_digest(),
        le_bytes(index.centroids, "f4"),
        le_bytes(index.assignment, "u4"),
    ]
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_ivf(path, store: MemoryStore) -> IvfIndex:
    r = Reader(read_file(path), str(path))
    r.expect_header(IVF_MAGIC, IVF_VERSION)
    n_lists, dim, count = r.u32(), r.u32(), r.u64()
    seed, iters = r.u64(), r.u32()
    digest = r.take(32)
    centroids = r.array("f4", (n_lists, dim))
    assign = r.array("u4", (count,)).astype(np.int64)
    if not r.at_end():
        raise FormatError(f"{path}: trailing bytes")
    if digest != store.key_digest():
        raise StaleCacheError(f"{path}: index was built for a different store")
    return IvfIndex(store, centroids, assign, seed, iters)


# --- k-NN cache ------------------------------------------------------------

CACHE_MAGIC = b"RACC"
CACHE_VERSION = 1
_ROW_DTYPE = np.dtype([("id", "<u8"), ("score", "<f4")])


def knn_digest(index, queries, k: int, n_probe: NProbe = None, exclude_self: bool = False) -> bytes:
    """Content hash of everything that determines a cache's rows."""
    Q = np.asarray(queries)
    h = hashlib.sha256()
    h.update(b"racc-digest-v1|")
    h.update(index.descriptor() + b"|")
    h.update(index.store.key_digest())
    h.update(pack_u64(Q.shape[0]) + pack_u32(Q.shape[1] if Q.ndim == 2 else 0))
    h.update(le_bytes(Q, "f4"))
    h.update(pack_u32(k) + pack_u32(index.resolve_n_probe(n_probe)) + pack_u32(int(exclude_self)))
    return h.digest()


@dataclass
class KnnCache:
    """Precomputed neighbor lists, one row per query, in query order."""

    k: int
    ids: np.ndarray
    scores: np.ndarray
    digest: bytes

    @property
    def n_queries(self) -> int:
        return self.ids.shape[0]

    def row(self, i: int) -> list[tuple[int, float]]:
        return [(int(a), float(b)) for a, b in zip(self.ids[i], self.scores[i])]

    def check(self, expected_digest: bytes) -> None:
        if self.digest != expected_digest:
            raise StaleCacheError(
                "k-NN cache digest mismatch: cache was built for a different index, "
                "query set, k, or probe setting"
            )

    def equals(self, other: "KnnCache") -> bool:
        return (
            self.k == other.k
            and self.digest == other.digest
            and self.ids.tobytes() == other.ids.tobytes()
            and self.scores.tobytes() == other.scores.tobytes()
        )


def precompute_knn(index, queries, k: int, n_probe: NProbe = None,
                   exclude_self: bool = False) -> KnnCache:
    """Neighbor lists for every query row, reusable across training epochs.

    With ``exclude_self`` query ``i`` never retrieves memory row ``i`` (used
    when the memory is the query set itself).
    """
    Q = np.asarray(queries)
    ex = np.arange(Q.shape[0]) if exclude_self else None
    ids, scores = index.search(Q, k, n_probe=n_probe, exclude_ids=ex)
    return KnnCache(ids.shape[1], ids, scores, knn_digest(index, Q, k, n_probe, exclude_self))


def write_knn_cache(cache: KnnCache, path) -> None:
    rows = np.empty(cache.ids.shape, dtype=_ROW_DTYPE)
    rows["id"] = cache.ids
    rows["score"] = cache.scores
    with open(path, "wb") as fh:
        fh.write(
            CACHE_MAGIC
            + pack_u32(CACHE_VERSION)
            + pack_u64(cache.n_queries)
            + pack_u32(cache.k)
            + cache.digest
            + rows.tobytes()
        )


def read_knn_cache(path, expected_digest: Optional[bytes] = None) -> KnnCache:
    r = Reader(read_file(path), str(path))
    r.expect_header(CACHE_MAGIC, CACHE_VERSION)
    n, k = r.u64(), r.u32()
    digest = r.take(32)
    raw = r.take(n * k * _ROW_DTYPE.itemsize)
    if not r.at_end():
        raise FormatError(f"{path}: trailing bytes")
    rows = np.frombuffer(raw, dtype=_ROW_DTYPE).reshape(n, k)
    cache = KnnCache(k, rows["id"].astype(np.int64), rows["score"].astype(np.float32), digest)
    if expected_digest is not None:
        cache.check(expected_digest)
    return cache
