"""Classifier heads, losses, the training loop and shot-bucketed evaluation."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import fusion
from .index import ExactIndex, KnnCache
from .nn import (
    Adam,
    ParamSet,
    Schedule,
    dense_backward,
    dense_forward,
    grad_check,
    relu_backward,
    relu_forward,
    uniform_init,
)
from .store import MemoryStore, merge

log = logging.getLogger(__name__)

MODES = ("linear", "mlp", "mean_knn", "mam")
RETRIEVAL_MODES = ("mean_knn", "mam")


@dataclass
class DownstreamDataset:
    embeddings: np.ndarray  # (N, d) float32
    labels: np.ndarray  # (N,) int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.embeddings.ndim != 2 or self.labels.shape != (self.embeddings.shape[0],):
            raise ValueError("embeddings must be (N, d) with one label per row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


# --- losses ----------------------------------------------------------------

def log_prior_offsets(class_counts, tau: float) -> np.ndarray:
    """``tau * ln(count_c / N)`` per class."""
    counts = np.asarray(class_counts, dtype=np.float64)
    if tau < 0:
        raise ValueError("tau must be >= 0")
    if tau > 0 and np.any(counts <= 0):
        raise ValueError("logit adjustment needs every class to have training examples")
    if tau == 0:
        return np.zeros_like(counts)
    return tau * np.log(counts / counts.sum())


def lace_logits(raw_logits, class_counts, tau: float) -> np.ndarray:
    """Logit-adjusted scores used inside the training loss (not at evaluation)."""
    return np.asarray(raw_logits) + log_prior_offsets(class_counts, tau)


def ce_label_smoothing(logits: np.ndarray, labels, epsilon: float = 0.1):
    """Mean smoothed cross-entropy over a batch and its gradient w.r.t. logits.

    The target puts ``1 - epsilon`` on the true class and ``epsilon / (C - 1)``
    on each other class. Accepts a single (C,) vector with an int label too.
    """
    single = logits.ndim == 1
    logits2 = np.atleast_2d(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    B, C = logits2.shape
    if not 0 <= epsilon < 1:
        raise ValueError("epsilon must be in [0, 1)")
    if labels.shape != (B,) or labels.min() < 0 or labels.max() >= C:
        raise ValueError("label out of range")
    shifted = logits2 - logits2.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    off = epsilon / (C - 1) if C > 1 else 0.0
    target = np.full_like(logp, off)
    target[np.arange(B), labels] = 1.0 - epsilon if C > 1 else 1.0
    loss = -(target * logp).sum(axis=1)
    grad = (np.exp(logp) - target) / B
    if single:
        return float(loss[0]), grad[0] * B
    return float(loss.mean()), grad


# --- model -----------------------------------------------------------------

@dataclass
class ModelHead:
    mode: str
    d: int
    d_prime: int
    num_classes: int
    num_layers: int
    params: ParamSet

    @property
    def uses_retrieval(self) -> bool:
        return self.mode in RETRIEVAL_MODES


def build_head(mode: str, d: int, num_classes: int, d_prime: int = 0, num_layers: int = 8,
               seed: int = 0, dtype=np.float32) -> ModelHead:
    """Fresh parameters for ``mode``.

    The classifier is drawn from its own generator stream so that every mode
    built with the same seed starts from the same classifier weights.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode in RETRIEVAL_MODES and d_prime < 1:
        raise ValueError("retrieval modes need value_dim >= 1")
    params = ParamSet(dtype)
    head_rng = np.random.default_rng([seed, 0])
    if mode == "mlp":
        params.add("mlp.hidden.W", uniform_init(head_rng, d, (d, d)))
        params.add("mlp.hidden.b", np.zeros(d))
    params.add("head.W", uniform_init(head_rng, d, (d, num_classes)))
    params.add("head.b", np.zeros(num_classes))
    if mode == "mean_knn":
        fusion.init_mean_params(params, d, d_prime)
    elif mode == "mam":
        fusion.init_mam_params(params, fusion.MamConfig(d, d_prime, num_layers),
                               np.random.default_rng([seed, 1]))
    return ModelHead(mode, d, d_prime if mode in RETRIEVAL_MODES else 0, num_classes,
                     num_layers if mode == "mam" else 0, params)


def head_from_params(params: ParamSet) -> ModelHead:
    """Recover mode and shapes from parameter names (used after loading a checkpoint)."""
    d, C = params["head.W"].shape
    if "mam.0.psi_q.W" in params:
        return ModelHead("mam", d, params["mam.0.chi.W"].shape[0], C, fusion.count_layers(params), params)
    if "mean.chi.W" in params:
        return ModelHead("mean_knn", d, params["mean.chi.W"].shape[0], C, 0, params)
    if "mlp.hidden.W" in params:
        return ModelHead("mlp", d, 0, C, 0, params)
    return ModelHead("linear", d, 0, C, 0, params)


def forward_model(head: ModelHead, z: np.ndarray, M: Optional[np.ndarray] = None,
                  V: Optional[np.ndarray] = None):
    """Logits for a batch of queries. Returns (logits, cache)."""
    p = head.params
    cache: dict = {}
    if head.uses_retrieval and V is None:
        raise ValueError(f"mode {head.mode!r} needs retrieved neighbors")
    if head.mode == "linear":
        feat = z
    elif head.mode == "mlp":
        h, cache["hidden"] = dense_forward(p["mlp.hidden.W"].value, p["mlp.hidden.b"].value, z)
        feat, cache["relu"] = relu_forward(h)
    elif head.mode == "mean_knn":
        feat, cache["mean"] = fusion.mean_fusion(z, V, p)
    else:
        if M is None:
            raise ValueError("mam mode needs retrieved keys")
        feat, cache["trace"], cache["mam"] = fusion.mam_forward(z, M, V, p, head.num_layers)
    logits, cache["head"] = dense_forward(p["head.W"].value, p["head.b"].value, feat)
    return logits, cache


def backward_model(head: ModelHead, cache: dict, dlogits: np.ndarray) -> np.ndarray:
    """Accumulate parameter grads; return dL/dz."""
    p = head.params
    dW, db, dfeat = dense_backward(cache["head"], dlogits)
    p["head.W"].grad += dW
    p["head.b"].grad += db
    if head.mode == "linear":
        return dfeat
    if head.mode == "mlp":
        dh = relu_backward(cache["relu"], dfeat)
        dW, db, dz = dense_backward(cache["hidden"], dh)
        p["mlp.hidden.W"].grad += dW
        p["mlp.hidden.b"].grad += db
        return dz
    if head.mode == "mean_knn":
        return fusion.mean_fusion_backward(cache["mean"], dfeat, p)
    return fusion.mam_backward(cache["mam"], dfeat, p)


def gather_neighbors(store: MemoryStore, ids: np.ndarray):
    """Keys (B, k, d) and values (B, k, d') of the given memory ids."""
    return store.keys[ids], store.values[ids]


def model_grad_check(mode: str = "mam", d: int = 8, d_prime: int = 6, k: int = 5,
                     num_layers: int = 2, num_classes: int = 5, batch: int = 3,
                     epsilon: float = 0.1, seed: int = 0, fd_step: float = 1e-5,
                     max_coords: int = 64, tolerance: float = 1e-4):
    """Finite-difference check of a float64 head composed with the smoothed-CE loss.

    Every parameter (including the zero-initialised fusion output layer and
    the biases) is redrawn from uniform(+-1/sqrt(fan_in)) so no gradient path
    is trivially zero.
    """
    rng = np.random.default_rng(seed)
    head = build_head(mode, d, num_classes, d_prime if mode in RETRIEVAL_MODES else 0,
                      num_layers, seed, dtype=np.float64)
    for p in head.params:
        fan_in = head.params[p.name[:-1] + "W"].shape[0]
        p.value[...] = uniform_init(rng, fan_in, p.shape)
    z = rng.standard_normal((batch, d))
    M = rng.standard_normal((batch, k, d))
    M /= np.linalg.norm(M, axis=-1, keepdims=True)
    V = rng.standard_normal((batch, k, d_prime))
    labels = rng.integers(0, num_classes, batch)

    def loss_fn():
        head.params.zero_grads()
        logits, cache = forward_model(head, z, M, V)
        loss, dlogits = ce_label_smoothing(logits, labels, epsilon)
        backward_model(head, cache, dlogits)
        return loss

    return grad_check(loss_fn, head.params, fd_step=fd_step, max_coords=max_coords, seed=seed,
                      tolerance=tolerance)


# --- training --------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: Optional[int] = None  # None -> min(512, N // 10)
    lr: float = 1e-3
    weight_decay: float = 0.2
    warmup_epochs: float = 1.0
    k: int = 100
    tau: float = 1.0
    epsilon: float = 0.1
    seed: int = 0
    shot_thresholds: tuple = (100, 20)

    def resolved_batch(self, n: int) -> int:
        if self.batch_size:
            return int(self.batch_size)
        return max(1, min(512, n // 10))

    def to_dict(self) -> dict:
        return asdict(self)


def train(head: ModelHead, train_set: DownstreamDataset, config: TrainConfig,
          store: Optional[MemoryStore] = None, knn_cache: Optional[KnnCache] = None, *,
          expected_digest: Optional[bytes] = None,
          eval_set: Optional[DownstreamDataset] = None, eval_index=None,
          on_epoch: Optional[Callable[[dict], None]] = None) -> list[dict]:
    """Fit ``head`` in place; return per-epoch history records.

    Retrieval modes read neighbors from ``knn_cache`` (one row per training
    example, in order). When ``expected_digest`` is given the cache must match
    it. When ``eval_set`` is given, each history record carries its metrics.
    """
    N = len(train_set)
    if N == 0:
        raise ValueError("empty training set")
    if head.uses_retrieval:
        if store is None or knn_cache is None:
            raise ValueError(f"mode {head.mode!r} needs a memory store and a k-NN cache")
        if expected_digest is not None:
            knn_cache.check(expected_digest)
        if knn_cache.n_queries != N:
            raise ValueError(f"cache has {knn_cache.n_queries} rows for {N} training examples")
    counts = train_set.class_counts
    offsets = None
    if config.tau > 0:
        off = log_prior_offsets(counts, config.tau)
        # uniform shift so a balanced prior is exactly zero (softmax-CE ignores shifts)
        offsets = (off - off.max()).astype(head.params.dtype)

    B = config.resolved_batch(N)
    steps_per_epoch = math.ceil(N / B)
    total = config.epochs * steps_per_epoch
    warmup = min(total, int(round(config.warmup_epochs * steps_per_epoch)))
    sched = Schedule(warmup, total, config.lr)
    opt = Adam(head.params, lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)

    eval_neighbors = None
    if eval_set is not None and head.uses_retrieval:
        index = eval_index if eval_index is not None else ExactIndex(store)
        eval_neighbors, _ = index.search(eval_set.embeddings, config.k)

    history = []
    step = 0
    z_all = train_set.embeddings.astype(head.params.dtype)
    for epoch in range(config.epochs):
        perm = rng.permutation(N)
        loss_sum = 0.0
        for s in range(0, N, B):
            idx = perm[s:s + B]
            head.params.zero_grads()
            M = V = None
            if head.uses_retrieval:
                M, V = gather_neighbors(store, knn_cache.ids[idx])
            logits, cache = forward_model(head, z_all[idx], M, V)
            if offsets is not None:
                logits = logits + offsets
            loss, dlogits = ce_label_smoothing(logits, train_set.labels[idx], config.epsilon)
            backward_model(head, cache, dlogits)
            step += 1
            opt.step(lr=sched.lr_at(step))
            loss_sum += loss * idx.shape[0]
        rec = {"epoch": epoch + 1, "loss": loss_sum / N}
        if eval_set is not None:
            m = evaluate(head, eval_set, store, None, config.k, counts,
                         config.shot_thresholds, neighbors=eval_neighbors)
            rec.update(m.summary())
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        log.info("epoch %d loss %.5f", epoch + 1, rec["loss"])
    return history


# --- evaluation ------------------------------------------------------------

def shot_categories(class_counts, thresholds=(100, 20)) -> np.ndarray:
    """'many' if count > many_min, 'low' if count < low_max, else 'mid'."""
    many_min, low_max = thresholds
    if not (many_min > low_max >= 1):
        raise ValueError(f"invalid shot thresholds {thresholds}")
    counts = np.asarray(class_counts)
    out = np.full(counts.shape, "mid", dtype=object)
    out[counts > many_min] = "many"
    out[counts < low_max] = "low"
    return out


@dataclass
class Metrics:
    overall: float
    many: Optional[float]
    mid: Optional[float]
    low: Optional[float]
    per_class: np.ndarray = field(repr=False)
    eval_counts: np.ndarray = field(repr=False)

    def summary(self) -> dict:
        return {"overall": self.overall, "many": self.many, "mid": self.mid, "low": self.low}


def metrics_from_predictions(pred, labels, num_classes: int, train_counts,
                             thresholds=(100, 20)) -> Metrics:
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty evaluation set")
    correct = (pred == labels).astype(np.float64)
    eval_counts = np.bincount(labels, minlength=num_classes)
    hits = np.bincount(labels, weights=correct, minlength=num_classes)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(eval_counts > 0, hits / np.maximum(eval_counts, 1), np.nan)
    cats = shot_categories(train_counts, thresholds)

    def bucket(name):
        mask = (cats == name) & (eval_counts > 0)
        if not mask.any():
            return None
        return float(hits[mask].sum() / eval_counts[mask].sum())

    return Metrics(float(correct.mean()), bucket("many"), bucket("mid"), bucket("low"),
                   per_class, eval_counts)


def predict(head: ModelHead, embeddings: np.ndarray, store: Optional[MemoryStore] = None,
            neighbors: Optional[np.ndarray] = None, batch: int = 256) -> np.ndarray:
    z = np.asarray(embeddings, dtype=head.params.dtype)
    out = np.empty(z.shape[0], dtype=np.int64)
    for s in range(0, z.shape[0], batch):
        M = V = None
        if head.uses_retrieval:
            M, V = gather_neighbors(store, neighbors[s:s + batch])
        logits, _ = forward_model(head, z[s:s + batch], M, V)
        out[s:s + batch] = np.argmax(logits, axis=1)
    return out


def evaluate(head: ModelHead, eval_set: DownstreamDataset, store: Optional[MemoryStore],
             index, k: int, train_counts, shot_thresholds=(100, 20), *,
             neighbors: Optional[np.ndarray] = None, n_probe=None) -> Metrics:
    """Top-1 accuracy overall and per shot bucket (buckets from training counts).

    Retrieval modes query ``index`` live unless ``neighbors`` (ids, one row per
    eval example) are supplied. ``index=None`` means exact search over ``store``.
    """
    if len(eval_set) == 0:
        raise ValueError("empty evaluation set")
    if head.uses_retrieval and neighbors is None:
        if index is None:
            index = ExactIndex(store)
        neighbors, _ = index.search(eval_set.embeddings, k, n_probe=n_probe)
    pred = predict(head, eval_set.embeddings, store, neighbors)
    return metrics_from_predictions(pred, eval_set.labels, head.num_classes, train_counts,
                                    shot_thresholds)


def grow_memory_eval(head: ModelHead, eval_set: DownstreamDataset, small_store: MemoryStore,
                     extra_store: MemoryStore, k: int, train_counts,
                     shot_thresholds=(100, 20)) -> tuple[Metrics, Metrics]:
    """Metrics against the training-time memory, then against it merged with more rows.

    The parameters are not touched between the two evaluations.
    """
    before_params = head.params.copy()
    before = evaluate(head, eval_set, small_store, ExactIndex(small_store), k, train_counts,
                      shot_thresholds)
    grown = merge(small_store, extra_store)
    after = evaluate(head, eval_set, grown, ExactIndex(grown), k, train_counts, shot_thresholds)
    assert head.params.equals(before_params)
    return before, after
