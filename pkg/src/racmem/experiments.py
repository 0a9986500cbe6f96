"""Synthetic benchmark recipes: baseline comparison, memory-size and k sweeps,
and growing the memory after training.

Every recipe is a pure function of its :class:`BenchmarkConfig` (including the
seed), so results are reproducible run to run.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .datagen import LongTailSpec, MemorySpec, gen_longtail, gen_memory
from .index import ExactIndex, precompute_knn
from .store import MemoryStore
from .training import (
    DownstreamDataset,
    Metrics,
    ModelHead,
    TrainConfig,
    build_head,
    evaluate,
    grow_memory_eval,
    shot_categories,
    train,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BenchmarkConfig:
    num_classes: int = 20
    head_count: int = 100
    tail_count: int = 5
    dim: int = 64
    value_dim: int = 64
    query_spread: float = 0.2
    memory_spread: float = 0.05
    eval_per_class: int = 100
    memory_size: int = 50_000
    relevant_per_class: int = 20
    value_mode: str = "text_proxy"
    k: int = 100
    num_layers: int = 8
    epochs: int = 10
    lr: float = 1e-3
    weight_decay: float = 0.2
    epsilon: float = 0.1
    tau: float = 1.0
    batch_size: Optional[int] = 16
    shot_thresholds: tuple = (100, 20)
    seed: int = 0

    def longtail_spec(self) -> LongTailSpec:
        return LongTailSpec(self.num_classes, self.head_count, self.tail_count, self.dim,
                            self.query_spread, self.eval_per_class, self.seed)

    def memory_spec(self, relevant_per_class=None, size=None, seed_offset: int = 1,
                    tag: str = "memory") -> MemorySpec:
        size = self.memory_size if size is None else size
        rel = self.relevant_per_class if relevant_per_class is None else relevant_per_class
        rel = np.broadcast_to(np.asarray(rel, dtype=np.float64), (self.num_classes,))
        rel_total = float(rel.sum())
        return MemorySpec(
            size=size,
            relevant_fraction=tuple(float(r) / size for r in rel),
            distractor_fraction=(size - rel_total) / size,
            value_mode=self.value_mode,
            spread=self.memory_spread,
            seed=self.seed * 1000 + seed_offset,
            source_tag=tag,
        )

    def train_config(self, k: Optional[int] = None) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           weight_decay=self.weight_decay, k=self.k if k is None else k,
                           tau=self.tau, epsilon=self.epsilon, seed=self.seed,
                           shot_thresholds=self.shot_thresholds)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Benchmark:
    train: DownstreamDataset
    eval: DownstreamDataset
    prototypes: np.ndarray
    memory: MemoryStore


def make_benchmark(cfg: BenchmarkConfig, memory_spec: Optional[MemorySpec] = None) -> Benchmark:
    tr, ev, protos = gen_longtail(cfg.longtail_spec())
    mem = gen_memory(protos, memory_spec or cfg.memory_spec(), cfg.dim, cfg.value_dim)
    return Benchmark(tr, ev, protos, mem)


def fit(mode: str, bench: Benchmark, cfg: BenchmarkConfig, k: Optional[int] = None,
        memory: Optional[MemoryStore] = None, cache=None) -> ModelHead:
    """Train one head of ``mode`` on the benchmark's training split."""
    memory = bench.memory if memory is None else memory
    k = cfg.k if k is None else k
    head = build_head(mode, cfg.dim, cfg.num_classes, cfg.value_dim, cfg.num_layers, cfg.seed)
    if head.uses_retrieval and cache is None:
        cache = precompute_knn(ExactIndex(memory), bench.train.embeddings, k)
    train(head, bench.train, cfg.train_config(k), memory, cache)
    return head


def fit_and_eval(modes: Iterable[str], bench: Benchmark, cfg: BenchmarkConfig,
                 k: Optional[int] = None, memory: Optional[MemoryStore] = None,
                 heads: Optional[dict] = None) -> dict[str, Metrics]:
    """Train and evaluate each mode against one memory; the index and caches are shared.

    Trained heads are stored in ``heads`` (keyed by mode) when a dict is given.
    """
    memory = bench.memory if memory is None else memory
    k = cfg.k if k is None else k
    index = ExactIndex(memory)
    cache = eval_nn = None
    out = {}
    counts = bench.train.class_counts
    for mode in modes:
        head = build_head(mode, cfg.dim, cfg.num_classes, cfg.value_dim, cfg.num_layers, cfg.seed)
        if head.uses_retrieval and cache is None:
            cache = precompute_knn(index, bench.train.embeddings, k)
            eval_nn, _ = index.search(bench.eval.embeddings, k)
        train(head, bench.train, cfg.train_config(k), memory, cache)
        if heads is not None:
            heads[mode] = head
        out[mode] = evaluate(head, bench.eval, memory, index, k, counts, cfg.shot_thresholds,
                             neighbors=eval_nn)
        log.info("seed %d mode %s k %d: %s", cfg.seed, mode, k, out[mode].summary())
    return out


def compare_baselines(cfg: BenchmarkConfig, modes=("linear", "mean_knn", "mam")) -> dict[str, Metrics]:
    bench = make_benchmark(cfg)
    return fit_and_eval(modes, bench, cfg)


def memory_scale_sweep(cfg: BenchmarkConfig, distractor_counts: Sequence[int],
                       modes=("mean_knn", "mam")) -> dict[int, dict[str, Metrics]]:
    """Same relevant items per class, growing numbers of distractors; retrain per size."""
    tr, ev, protos = gen_longtail(cfg.longtail_spec())
    out = {}
    for n_dis in distractor_counts:
        rel_total = cfg.relevant_per_class * cfg.num_classes
        spec = cfg.memory_spec(size=rel_total + n_dis)
        bench = Benchmark(tr, ev, protos, gen_memory(protos, spec, cfg.dim, cfg.value_dim))
        out[n_dis] = fit_and_eval(modes, bench, cfg)
    return out


def k_sweep(cfg: BenchmarkConfig, ks: Sequence[int], modes=("mean_knn", "mam")) -> dict[int, dict[str, Metrics]]:
    bench = make_benchmark(cfg)
    return {k: fit_and_eval(modes, bench, cfg, k=k) for k in ks}


def grow_trained(head: ModelHead, bench: Benchmark, cfg: BenchmarkConfig, extra_per_low_class: int,
                 extra_size: Optional[int] = None):
    """Evaluate a trained retrieval head before and after merging extra relevant
    rows for every low-shot class into its memory. Returns (before, after)."""
    counts = bench.train.class_counts
    low = shot_categories(counts, cfg.shot_thresholds) == "low"
    rel = np.where(low, extra_per_low_class, 0)
    size = int(rel.sum()) if extra_size is None else extra_size
    extra = gen_memory(bench.prototypes, cfg.memory_spec(rel, size=size, seed_offset=2, tag="extra"),
                       cfg.dim, cfg.value_dim)
    return grow_memory_eval(head, bench.eval, bench.memory, extra, cfg.k, counts, cfg.shot_thresholds)


def growing_memory(cfg: BenchmarkConfig, extra_per_low_class: int, extra_size: Optional[int] = None):
    """Train MAM on the configured memory, then evaluate with extra relevant rows
    for every low-shot class merged in (no retraining).

    Returns (before Metrics, after Metrics).
    """
    bench = make_benchmark(cfg)
    return grow_trained(fit("mam", bench, cfg), bench, cfg, extra_per_low_class, extra_size)
