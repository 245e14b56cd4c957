"""Dense float64 arithmetic with hand-written backward rules.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Each
differentiable op has a matching ``*_backward`` function taking the upstream
gradient and returning gradients for its inputs; composite blocks in
:mod:`ddpcil.encoder` chain these by hand. Correctness of every rule is pinned
by :func:`finite_diff_check`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import DegenerateInputError, DomainError, NumericError, ShapeError, UsageError


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


@dataclass(eq=False)
class Parameter:
    """A named tensor with an attached gradient buffer.

    ``grad`` stays ``None`` until something accumulates into it; the
    optimizer treats that as a usage error for trainable parameters.
    """

    value: np.ndarray
    name: str
    frozen: bool = False
    grad: np.ndarray | None = None

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=np.float64)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def accumulate(self, g: np.ndarray):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.value.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {self.value.shape} ({self.name})")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g


class Rng:
    """Seeded generator: numpy's PCG64 driven by a ``SeedSequence``.

    Streams are split by key, so ``Rng(seed).child("prompts", 7)`` is the
    same stream no matter what else was drawn before. PCG64 output and the
    SeedSequence hash are platform independent; the normal sampler is
    numpy's ziggurat, which is stable within a numpy release.
    """

    ALGORITHM = "PCG64/SeedSequence"

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(key)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, *key) -> "Rng":
        return Rng(self.seed, self.key + tuple(_key_int(k) for k in key))

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * float(std)

    def uniform(self, shape=None) -> np.ndarray:
        return self._gen.random(shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def _key_int(k) -> int:
    if isinstance(k, (int, np.integer)):
        if k < 0:
            raise ValueError("stream keys must be non-negative")
        return int(k)
    # stable across processes, unlike hash()
    return int.from_bytes(hashlib.sha256(str(k).encode("utf-8")).digest()[:8], "little")


# --- elementary ops -------------------------------------------------------


def matmul(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul")


def matmul_backward(a, b, grad_out):
    return grad_out @ b.T, a.T @ grad_out


def softmax_rows(m, temperature: float = 1.0) -> np.ndarray:
    if not temperature > 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    m = as_tensor(m)
    z = m / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return check_finite(e / e.sum(axis=-1, keepdims=True), "softmax")


def softmax_rows_backward(probs, grad_out, temperature: float = 1.0):
    inner = np.sum(grad_out * probs, axis=-1, keepdims=True)
    return probs * (grad_out - inner) / temperature


def cosine(u, v) -> float:
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape:
        raise ShapeError(f"cosine shape mismatch {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("cosine of a zero-norm vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def cosine_rows(u, v):
    """Row-wise cosine of two (..., d) arrays; returns (cos, norm_u, norm_v)."""
    nu = np.linalg.norm(u, axis=-1)
    nv = np.linalg.norm(v, axis=-1)
    if np.any(nu == 0.0) or np.any(nv == 0.0):
        raise DegenerateInputError("cosine of a zero-norm vector")
    c = np.sum(u * v, axis=-1) / (nu * nv)
    return np.clip(c, -1.0, 1.0), nu, nv


def cosine_rows_backward(u, v, cos, nu, nv, grad_out):
    g = np.asarray(grad_out)[..., None]
    du = g * (v / (nu * nv)[..., None] - cos[..., None] * u / (nu * nu)[..., None])
    dv = g * (u / (nu * nv)[..., None] - cos[..., None] * v / (nv * nv)[..., None])
    return du, dv


def layer_norm(x, scale, shift, eps: float = 1e-5) -> np.ndarray:
    y, _ = layer_norm_forward(x, scale, shift, eps)
    return y


def layer_norm_forward(x, scale, shift, eps: float = 1e-5):
    """Layer norm over the last axis; returns (y, cache) for the backward pass."""
    x = as_tensor(x)
    d = x.shape[-1]
    if np.shape(scale) != (d,) or np.shape(shift) != (d,):
        raise ShapeError(f"layer_norm affine must have shape ({d},)")
    flat = x.reshape(-1, d)
    y, xhat, rstd = kernels.K.layer_norm_fwd(flat, scale, shift, eps)
    return y.reshape(x.shape), (xhat, rstd, scale, x.shape)


def layer_norm_backward(grad_out, cache):
    """Returns (dx, dscale, dshift)."""
    xhat, rstd, scale, shape = cache
    dx, dg, db = kernels.K.layer_norm_bwd(grad_out.reshape(xhat.shape), xhat, rstd, scale)
    return dx.reshape(shape), dg, db


def gelu(x):
    return kernels.K.gelu_fwd(as_tensor(x))


def gelu_backward(x, grad_out):
    return kernels.K.gelu_bwd(x, grad_out)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# --- optimisation ---------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: Sequence[Parameter]) -> AdamState:
    """One bias-corrected Adam update.

    Moments are keyed by parameter name. Frozen parameters are skipped
    entirely and their gradients cleared; every gradient is zeroed afterward.
    """
    live = [p for p in params if not p.frozen]
    for p in live:
        if p.grad is None:
            raise UsageError(f"parameter {p.name!r} has no gradient")
        check_finite(p.grad, f"gradient of {p.name}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p in live:
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
        v = state.v[p.name]
        if m.shape != p.value.shape:
            raise ShapeError(f"Adam moment shape mismatch for {p.name}")
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.value -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    for p in params:
        p.zero_grad()
    return state


# --- gradient checking ----------------------------------------------------


def relative_error(analytic, numeric, floor: float = 1e-3):
    """|a - n| / max(|a|, |n|, floor), elementwise.

    The floor turns the comparison absolute for near-zero coordinates, where
    central differences are dominated by rounding.
    """
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def finite_diff_check(
    loss_fn: Callable[[Sequence[Parameter]], float],
    params: Sequence[Parameter],
    h: float = 1e-5,
    analytic: Sequence[np.ndarray] | None = None,
    floor: float = 1e-3,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Analytic gradients come from ``analytic`` if given, else from each
    parameter's ``grad``. Parameter values are restored afterward.
    """
    if not h > 0:
        raise DomainError("step h must be positive")
    if analytic is None:
        analytic = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        if np.shape(ga) != p.value.shape:
            raise ShapeError(f"analytic gradient for {p.name} has shape {np.shape(ga)}, expected {p.value.shape}")
        flat = p.value.reshape(-1)
        num = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(loss_fn(params))
            flat[i] = orig - h
            fm = float(loss_fn(params))
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite loss while perturbing {p.name}[{i}]")
            num[i] = (fp - fm) / (2.0 * h)
        err = relative_error(np.asarray(ga).reshape(-1), num, floor)
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
