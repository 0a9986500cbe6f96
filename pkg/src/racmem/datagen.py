"""Synthetic long-tailed benchmarks and synthetic key/value memories.

Classes are unit prototypes in the query space; an example of class ``c`` is
``normalize(prototype_c + spread * N(0, I))``. Memory items are either
*relevant* (keys drawn like class examples) or *distractors* (keys uniform on
the sphere, values pure noise).

Value embeddings have unit per-coordinate scale and come in two flavours:

``text_proxy``
    every relevant item of class ``c`` carries ``value_prototype_c + 0.1 * noise``,
    standing in for a caption/label encoder that maps same-class items to
    nearly the same vector.
``echo_visual``
    ``P @ key + 0.1 * noise`` for a fixed random projection ``P``, i.e. a second
    view of the key itself.

Value prototypes and ``P`` are derived from the class prototypes, so every
memory generated for one benchmark shares the same "value encoder".
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Sequence, Union

import numpy as np

from .store import MemoryStore, MetaRecord, normalize_rows, read_store, write_store
from .training import DownstreamDataset, shot_categories  # noqa: F401  (re-exported)

VALUE_MODES = ("text_proxy", "echo_visual")
VALUE_NOISE = 0.1


@dataclass(frozen=True)
class LongTailSpec:
    num_classes: int = 20
    head_count: int = 100
    tail_count: int = 5
    dim: int = 64
    spread: float = 0.3
    eval_per_class: int = 50
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.dim < 2:
            raise ValueError("need dim >= 2")
        if not self.head_count >= self.tail_count >= 1:
            raise ValueError("need head_count >= tail_count >= 1")
        if self.spread < 0 or self.eval_per_class < 1:
            raise ValueError("spread must be >= 0 and eval_per_class >= 1")


def longtail_counts(num_classes: int, head_count: int, tail_count: int) -> np.ndarray:
    """count_c = round(head * (tail/head) ** (c / (C-1))), half-up rounding."""
    c = np.arange(num_classes, dtype=np.float64)
    raw = head_count * (tail_count / head_count) ** (c / (num_classes - 1))
    return np.floor(raw + 0.5).astype(np.int64)


def _sample_class(rng, prototype: np.ndarray, n: int, spread: float) -> np.ndarray:
    x = prototype[None, :] + spread * rng.standard_normal((n, prototype.shape[0]))
    return normalize_rows(x)


def gen_longtail(spec: LongTailSpec):
    """Returns (train set, balanced eval set, prototypes (C, d))."""
    spec.validate()
    proto_ss, train_ss, eval_ss = np.random.SeedSequence(spec.seed).spawn(3)
    C, d = spec.num_classes, spec.dim
    prototypes = normalize_rows(np.random.default_rng(proto_ss).standard_normal((C, d)))
    counts = longtail_counts(C, spec.head_count, spec.tail_count)

    def build(ss, per_class, split):
        xs, ys = [], []
        for c, child in enumerate(ss.spawn(C)):
            xs.append(_sample_class(np.random.default_rng(child), prototypes[c].astype(np.float64),
                                    int(per_class[c]), spec.spread))
            ys.append(np.full(int(per_class[c]), c))
        return DownstreamDataset(np.concatenate(xs), np.concatenate(ys), C, split)

    train = build(train_ss, counts, "train")
    evals = build(eval_ss, np.full(C, spec.eval_per_class), "eval")
    return train, evals, prototypes


@dataclass(frozen=True)
class MemorySpec:
    """Composition of a synthetic memory.

    ``relevant_fraction`` is the share of ``size`` given to each class (a
    scalar, or one value per class); ``distractor_fraction`` is the share of
    uniform distractors; whatever remains is filled with uniform noise items.
    """

    size: int
    relevant_fraction: Union[float, Sequence[float]] = 0.0
    distractor_fraction: float = 0.0
    value_mode: str = "text_proxy"
    spread: float = 0.3
    seed: int = 0
    source_tag: str = "synthetic"


def relevant_counts(spec: MemorySpec, num_classes: int) -> np.ndarray:
    rf = np.broadcast_to(np.asarray(spec.relevant_fraction, dtype=np.float64), (num_classes,))
    if np.any(rf < 0) or np.any(rf > 1) or not 0 <= spec.distractor_fraction <= 1:
        raise ValueError("fractions must lie in [0, 1]")
    if rf.sum() + spec.distractor_fraction > 1 + 1e-12:
        raise ValueError("relevant and distractor fractions sum to more than 1")
    return np.floor(rf * spec.size + 0.5).astype(np.int64)


def _encoder_rng(prototypes: np.ndarray, tag: str) -> np.random.Generator:
    h = hashlib.sha256(np.ascontiguousarray(prototypes, dtype="<f4").tobytes() + tag.encode())
    return np.random.default_rng(int.from_bytes(h.digest()[:8], "little"))


def value_prototypes(prototypes: np.ndarray, value_dim: int) -> np.ndarray:
    """Per-class value vectors (C, d'), a fixed function of the class prototypes."""
    return _encoder_rng(prototypes, f"text:{value_dim}").standard_normal((prototypes.shape[0], value_dim))


def echo_projection(prototypes: np.ndarray, value_dim: int) -> np.ndarray:
    """Fixed (d', d) projection used by ``echo_visual`` values."""
    d = prototypes.shape[1]
    return _encoder_rng(prototypes, f"echo:{value_dim}").standard_normal((value_dim, d))


def gen_memory(prototypes: np.ndarray, spec: MemorySpec, key_dim: int, value_dim: int) -> MemoryStore:
    """Relevant items (class order), then distractors, then noise filler."""
    if spec.size < 1:
        raise ValueError("memory size must be >= 1")
    if spec.value_mode not in VALUE_MODES:
        raise ValueError(f"unknown value mode {spec.value_mode!r}")
    prototypes = np.asarray(prototypes, dtype=np.float32)
    C = prototypes.shape[0]
    if prototypes.shape[1] != key_dim:
        raise ValueError("prototype width differs from key_dim")
    rel = relevant_counts(spec, C)
    n_dis = int(np.floor(spec.distractor_fraction * spec.size + 0.5))
    n_noise = spec.size - int(rel.sum()) - n_dis
    if n_noise < 0:
        raise ValueError("memory composition exceeds its size")

    rng = np.random.default_rng(spec.seed)
    vproto = value_prototypes(prototypes, value_dim)
    proj = echo_projection(prototypes, value_dim) if spec.value_mode == "echo_visual" else None
    store = MemoryStore(key_dim, value_dim)

    def values_for(keys, cls):
        noise = VALUE_NOISE * rng.standard_normal((keys.shape[0], value_dim))
        if spec.value_mode == "echo_visual":
            return keys.astype(np.float64) @ proj.T + noise
        return vproto[cls][None, :] + noise

    for c in range(C):
        if rel[c] == 0:
            continue
        keys = _sample_class(rng, prototypes[c].astype(np.float64), int(rel[c]), spec.spread)
        meta = [MetaRecord(spec.source_tag, c)] * int(rel[c])
        store.extend(keys, values_for(keys, c), meta)
    for n, tag in ((n_dis, "distractor"), (n_noise, "noise")):
        if n == 0:
            continue
        keys = normalize_rows(rng.standard_normal((n, key_dim)))
        vals = rng.standard_normal((n, value_dim))
        store.extend(keys, vals, [MetaRecord(f"{spec.source_tag}:{tag}", None)] * n)
    return store


# --- persistence -----------------------------------------------------------

def dataset_to_store(ds: DownstreamDataset) -> MemoryStore:
    """Downstream embeddings as a zero-value-width store; class_hint holds the label."""
    store = MemoryStore(ds.dim, 0)
    store.extend(ds.embeddings, np.zeros((len(ds), 0), dtype=np.float32),
                 [MetaRecord(ds.split, int(y)) for y in ds.labels])
    return store


def write_dataset(ds: DownstreamDataset, path) -> None:
    write_store(dataset_to_store(ds), path)


def read_dataset(path, labels, num_classes: int, split: str) -> DownstreamDataset:
    store = read_store(path)
    return DownstreamDataset(store.keys.copy(), np.asarray(labels), num_classes, split)


def write_sidecar(path, spec: LongTailSpec, train: DownstreamDataset, evals: DownstreamDataset,
                  prototypes: np.ndarray, memory_spec: MemorySpec | None = None,
                  value_dim: int | None = None) -> None:
    doc = {
        "spec": asdict(spec),
        "memory_spec": None if memory_spec is None else asdict(memory_spec),
        "value_dim": value_dim,
        "num_classes": spec.num_classes,
        "train_labels": train.labels.tolist(),
        "eval_labels": evals.labels.tolist(),
        "train_counts": train.class_counts.tolist(),
        "eval_counts": evals.class_counts.tolist(),
        "prototypes": np.asarray(prototypes, dtype=np.float32).astype(float).tolist(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def read_sidecar(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    doc["prototypes"] = np.asarray(doc["prototypes"], dtype=np.float32)
    return doc
