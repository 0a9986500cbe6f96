"""Small differentiable kernels with hand-written backward passes.

Everything is plain numpy: a named parameter registry, affine layers, a
max-shifted softmax, Adam with decoupled weight decay, a linear-warmup cosine
schedule and a central finite-difference gradient checker.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Iterator, Optional

import numpy as np

from ._binio import FormatError, Reader, le_bytes, pack_u32, read_file


class Param:
    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape}, dtype={self.value.dtype})"


class ParamSet:
    """Ordered name -> Param registry. Iteration order is registration order."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: OrderedDict[str, Param] = OrderedDict()

    def add(self, name: str, value) -> Param:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Param(name, np.array(value, dtype=self.dtype, copy=True))
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Param]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grads(self) -> None:
        for p in self:
            p.grad[...] = 0

    def astype(self, dtype) -> "ParamSet":
        out = ParamSet(dtype)
        for p in self:
            out.add(p.name, p.value)
        return out

    def copy(self) -> "ParamSet":
        return self.astype(self.dtype)

    def equals(self, other: "ParamSet") -> bool:
        """Bitwise equality of names, shapes and values."""
        if self.names() != other.names():
            return False
        return all(
            a.value.dtype == b.value.dtype and a.value.tobytes() == b.value.tobytes()
            for a, b in zip(self, other)
        )

    def num_values(self) -> int:
        return sum(p.value.size for p in self)


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# --- kernels ---------------------------------------------------------------

def dense_forward(W: np.ndarray, b: np.ndarray, x: np.ndarray):
    """y = x W + b for x of shape (..., m). Returns (y, cache)."""
    if x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ValueError(f"shape mismatch: x {x.shape}, W {W.shape}, b {b.shape}")
    return x @ W + b, (W, x)


def dense_backward(cache, dy: np.ndarray):
    """Gradients (dW, db, dx) of y = x W + b given upstream dy."""
    W, x = cache
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return x2.T @ dy2, dy2.sum(axis=0), dy @ W.T


def softmax_forward(s: np.ndarray):
    """Softmax over the last axis, max-subtracted. Returns (p, cache)."""
    if not np.all(np.isfinite(s)):
        raise ValueError("softmax input has non-finite entries")
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    return p, p


def softmax_backward(cache, dy: np.ndarray) -> np.ndarray:
    p = cache
    return p * (dy - (dy * p).sum(axis=-1, keepdims=True))


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(mask, dy):
    return dy * mask


# --- optimisation ----------------------------------------------------------

class Adam:
    """Adam with bias correction and decoupled weight decay.

    Each step first shrinks every value by ``lr * weight_decay`` and then
    applies the usual moment-normalized update.
    """

    def __init__(self, params: ParamSet, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.base_lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {p.name: np.zeros_like(p.value) for p in params}
        self.v = {p.name: np.zeros_like(p.value) for p in params}

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.base_lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in self.params:
            m, v = self.m[p.name], self.v[p.name]
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            if self.weight_decay:
                p.value -= (lr * self.weight_decay) * p.value
            p.value -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.value.dtype)


@dataclass(frozen=True)
class Schedule:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to 0 at ``total_steps``."""

    warmup_steps: int
    total_steps: int
    base_lr: float

    def __post_init__(self):
        if self.total_steps < 1 or not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError(f"invalid schedule {self}")

    def lr_at(self, step: int) -> float:
        if not 0 <= step <= self.total_steps:
            raise ValueError(f"step {step} outside [0, {self.total_steps}]")
        w = self.warmup_steps
        if step < w:
            return self.base_lr * step / w
        if self.total_steps == w:
            return self.base_lr
        progress = (step - w) / (self.total_steps - w)
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def lr_at(schedule: Schedule, step: int) -> float:
    return schedule.lr_at(step)


# --- gradient checking -----------------------------------------------------

class NonDeterministicLossError(Exception):
    pass


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    worst_index: tuple
    n_checked: int
    noise_floor: float

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_err < tolerance


def grad_check(loss_fn: Callable[[], float], params: ParamSet, fd_step: float = 1e-5,
               max_coords: int = 64, seed: int = 0,
               noise_floor: Optional[float] = None, tolerance: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``loss_fn()`` must evaluate the loss at the current parameter values and
    leave analytic gradients in ``Param.grad`` (it is responsible for zeroing
    them). Parameters with more than ``max_coords`` entries are checked on a
    seeded random subsample.

    rel_err = |a - f| / max(floor, |a| + |f|). Rounding in the loss puts an
    absolute error of roughly ``eps * |loss| / fd_step`` on every difference
    quotient, so a relative error of ``tolerance`` can only be resolved for
    gradients above ``10 * eps * max(1, |loss|) / (fd_step * tolerance)``. That
    is the default floor; smaller coordinates (e.g. a bias that softmax ignores,
    or early layers of a deep stack) are effectively judged on absolute error.
    """
    base = float(loss_fn())
    analytic = {p.name: p.grad.copy() for p in params}
    if float(loss_fn()) != base:
        raise NonDeterministicLossError("loss_fn returned different values for identical parameters")
    if noise_floor is None:
        eps = np.finfo(params.dtype).eps
        noise_floor = 10 * eps * max(1.0, abs(base)) / (fd_step * tolerance)
    floor = max(1e-12, noise_floor)

    rng = np.random.default_rng(seed)
    worst = (0.0, "", ())
    n_checked = 0
    for p in params:
        flat = p.value.reshape(-1)
        if flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        else:
            coords = np.arange(flat.size)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + fd_step
            lp = float(loss_fn())
            flat[c] = orig - fd_step
            lm = float(loss_fn())
            flat[c] = orig
            f = (lp - lm) / (2 * fd_step)
            a = float(analytic[p.name].reshape(-1)[c])
            err = abs(a - f) / max(floor, abs(a) + abs(f))
            n_checked += 1
            if err > worst[0] or not worst[1]:
                worst = (err, p.name, np.unravel_index(c, p.shape))
    loss_fn()  # leave grads consistent with the restored values
    return GradCheckReport(worst[0], worst[1], tuple(int(i) for i in worst[2]), n_checked, floor)


# --- checkpoints -----------------------------------------------------------

CKPT_MAGIC = b"RACP"
CKPT_VERSION = 1


def write_checkpoint(params: ParamSet, path) -> None:
    parts = [CKPT_MAGIC, pack_u32(CKPT_VERSION), pack_u32(len(params))]
    for p in params:
        name = p.name.encode("utf-8")
        parts += [pack_u32(len(name)), name, pack_u32(p.value.ndim)]
        parts += [pack_u32(s) for s in p.shape]
        parts.append(le_bytes(p.value, "f4"))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_checkpoint(path) -> ParamSet:
    r = Reader(read_file(path), str(path))
    r.expect_header(CKPT_MAGIC, CKPT_VERSION)
    out = ParamSet(np.float32)
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        shape = tuple(r.u32() for _ in range(r.u32()))
        out.add(name, r.array("f4", shape))
    if not r.at_end():
        raise FormatError(f"{path}: trailing bytes")
    return out
