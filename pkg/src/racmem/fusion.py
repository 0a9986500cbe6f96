"""Retrieval fusion: combine a query embedding with its retrieved memory.

Two fusion modules are provided, both residual on the query ``z``:

* mean fusion:  ``z + chi(mean(V))``
* memory attention, stacked ``num_layers`` times::

      f0 = z
      f_l = z + chi_l( softmax( <psi_q_l(f_{l-1}), psi_k_l(m_j)> / sqrt(d) ) @ V )

  Each layer owns its ``psi_q``, ``psi_k`` (d -> d) and ``chi`` (d' -> d)
  affine maps. ``chi`` starts at zero so an untrained module is the identity.

All functions take a batch: ``z`` (B, d), ``M`` (B, k, d), ``V`` (B, k, d').
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .nn import (
    ParamSet,
    dense_backward,
    dense_forward,
    softmax_backward,
    softmax_forward,
    uniform_init,
)


@dataclass(frozen=True)
class MamConfig:
    d: int
    d_prime: int
    num_layers: int = 8
    k: int = 100

    def __post_init__(self):
        if min(self.d, self.d_prime, self.num_layers, self.k) < 1:
            raise ValueError(f"invalid MamConfig {self}")


def layer_names(layer: int) -> dict[str, str]:
    p = f"mam.{layer}."
    return {
        "wq": p + "psi_q.W", "bq": p + "psi_q.b",
        "wk": p + "psi_k.W", "bk": p + "psi_k.b",
        "wc": p + "chi.W", "bc": p + "chi.b",
    }


def init_mam_params(params: ParamSet, config: MamConfig, rng: np.random.Generator) -> None:
    d, dp = config.d, config.d_prime
    for layer in range(config.num_layers):
        n = layer_names(layer)
        params.add(n["wq"], uniform_init(rng, d, (d, d)))
        params.add(n["bq"], np.zeros(d))
        params.add(n["wk"], uniform_init(rng, d, (d, d)))
        params.add(n["bk"], np.zeros(d))
        params.add(n["wc"], np.zeros((dp, d)))
        params.add(n["bc"], np.zeros(d))


def init_mean_params(params: ParamSet, d: int, d_prime: int) -> None:
    params.add("mean.chi.W", np.zeros((d_prime, d)))
    params.add("mean.chi.b", np.zeros(d))


def count_layers(params: ParamSet) -> int:
    n = 0
    while layer_names(n)["wq"] in params:
        n += 1
    return n


def _check_inputs(z, M, V, d: Optional[int] = None):
    if z.ndim != 2 or M.ndim != 3 or V.ndim != 3:
        raise ValueError("expected z (B, d), M (B, k, d), V (B, k, d')")
    B, k = M.shape[0], M.shape[1]
    if k == 0:
        raise ValueError("no retrieved memory rows (k = 0)")
    if z.shape[0] != B or V.shape[:2] != (B, k):
        raise ValueError(f"batch/k mismatch: z {z.shape}, M {M.shape}, V {V.shape}")
    if M.shape[2] != z.shape[1]:
        raise ValueError(f"key dim {M.shape[2]} != query dim {z.shape[1]}")


# --- mean fusion -----------------------------------------------------------

def mean_fusion(z: np.ndarray, V: np.ndarray, params: ParamSet):
    """Returns (refined (B, d), cache)."""
    if V.ndim != 3 or V.shape[1] == 0:
        raise ValueError("mean fusion needs V of shape (B, k>=1, d')")
    if V.shape[0] != z.shape[0]:
        raise ValueError(f"batch mismatch: z {z.shape}, V {V.shape}")
    W, b = params["mean.chi.W"].value, params["mean.chi.b"].value
    vbar = V.mean(axis=1)
    u, cache = dense_forward(W, b, vbar)
    return z + u, cache


def mean_fusion_backward(cache, d_refined: np.ndarray, params: ParamSet) -> np.ndarray:
    dW, db, _ = dense_backward(cache, d_refined)
    params["mean.chi.W"].grad += dW
    params["mean.chi.b"].grad += db
    return d_refined


# --- memory attention ------------------------------------------------------

@dataclass
class FusionTrace:
    """Per-layer attention weights for each query in a batch."""

    layers: list  # num_layers arrays of shape (B, k)
    refined: np.ndarray  # (B, d)
    ids: Optional[np.ndarray] = None  # (B, k) memory ids, when known

    def weights(self, b: int = 0) -> np.ndarray:
        """(num_layers, k) attention matrix of batch item ``b``."""
        return np.stack([a[b] for a in self.layers])

    def to_json(self, b: int = 0) -> str:
        ids = [] if self.ids is None else [int(i) for i in self.ids[b]]
        return json.dumps({
            "ids": ids,
            "layers": [[float(w) for w in a[b]] for a in self.layers],
            "refined_norm": float(np.linalg.norm(self.refined[b])),
        })


@dataclass
class _LayerCache:
    f_prev: np.ndarray
    q: np.ndarray
    K: np.ndarray
    a: np.ndarray
    u: np.ndarray


@dataclass
class MamCache:
    z: np.ndarray
    M: np.ndarray
    V: np.ndarray
    layers: list = field(default_factory=list)


def _layer(params: ParamSet, layer: int, z, f_prev, M, V, scale):
    n = layer_names(layer)
    q, _ = dense_forward(params[n["wq"]].value, params[n["bq"]].value, f_prev)
    K, _ = dense_forward(params[n["wk"]].value, params[n["bk"]].value, M)
    s = np.einsum("bd,bkd->bk", q, K) * scale
    a, _ = softmax_forward(s)
    u = np.einsum("bk,bkv->bv", a, V)
    y, _ = dense_forward(params[n["wc"]].value, params[n["bc"]].value, u)
    return z + y, _LayerCache(f_prev, q, K, a, u)


def mam_forward(z: np.ndarray, M: np.ndarray, V: np.ndarray, params: ParamSet,
                num_layers: Optional[int] = None):
    """Refine ``z`` with stacked memory attention.

    Returns ``(refined, trace, cache)``; ``cache`` feeds :func:`mam_backward`.
    """
    _check_inputs(z, M, V)
    L = count_layers(params) if num_layers is None else num_layers
    if L < 1:
        raise ValueError("no attention layers in params")
    scale = 1.0 / math.sqrt(z.shape[1])
    cache = MamCache(z, M, V)
    f = z
    for layer in range(L):
        f, lc = _layer(params, layer, z, f, M, V, scale)
        cache.layers.append(lc)
    trace = FusionTrace([lc.a for lc in cache.layers], f)
    return f, trace, cache


def mam_backward(cache: MamCache, d_refined: np.ndarray, params: ParamSet) -> np.ndarray:
    """Accumulate parameter gradients into ``params``; return dL/dz."""
    z, M = cache.z, cache.M
    if d_refined.shape != z.shape:
        raise ValueError(f"d_refined shape {d_refined.shape} != {z.shape}")
    scale = 1.0 / math.sqrt(z.shape[1])
    dz = np.zeros_like(z)
    df = d_refined
    for layer in reversed(range(len(cache.layers))):
        lc = cache.layers[layer]
        n = layer_names(layer)
        if params[n["wc"]].shape[0] != cache.V.shape[2]:
            raise ValueError("cache does not match parameter shapes")
        dz += df
        dWc, dbc, du = dense_backward((params[n["wc"]].value, lc.u), df)
        params[n["wc"]].grad += dWc
        params[n["bc"]].grad += dbc
        da = np.einsum("bv,bkv->bk", du, cache.V)
        ds = softmax_backward(lc.a, da) * scale
        dq = np.einsum("bk,bkd->bd", ds, lc.K)
        dK = ds[:, :, None] * lc.q[:, None, :]
        dWk, dbk, _ = dense_backward((params[n["wk"]].value, M), dK)
        params[n["wk"]].grad += dWk
        params[n["bk"]].grad += dbk
        dWq, dbq, df = dense_backward((params[n["wq"]].value, lc.f_prev), dq)
        params[n["wq"]].grad += dWq
        params[n["bq"]].grad += dbq
    # the first layer's query input is z itself
    return dz + df


def attention_trace(z, M, V, params: ParamSet, ids=None, num_layers: Optional[int] = None) -> FusionTrace:
    """Forward pass that keeps only the attention weights and the output."""
    z = np.atleast_2d(z)
    if M.ndim == 2:
        M, V = M[None], V[None]
    _check_inputs(z, M, V)
    L = count_layers(params) if num_layers is None else num_layers
    scale = 1.0 / math.sqrt(z.shape[1])
    f = z
    weights = []
    for layer in range(L):
        f, lc = _layer(params, layer, z, f, M, V, scale)
        weights.append(lc.a)
    return FusionTrace(weights, f, None if ids is None else np.atleast_2d(ids))
