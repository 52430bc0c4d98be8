"""Minimal dense/sparse numeric kernel with hand-written backward passes.

Every forward op returns ``(out, cache)`` and the matching backward op takes the
upstream gradient plus that cache. Shapes are checked explicitly; nothing is
broadcast silently. All arithmetic is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import KernelError, OptimizerError


def _check_2d(name: str, a) -> None:
    if getattr(a, "ndim", None) != 2:
        raise KernelError(f"{name} must be 2-D, got shape {getattr(a, 'shape', None)}")


# ------------------------------------------------------------------ elementwise


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    """log(1 + exp(x)), stable for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(dout, mask):
    if dout.shape != mask.shape:
        raise KernelError(f"relu grad shape {dout.shape} != input shape {mask.shape}")
    # subgradient 0 at x == 0 (mask is strict)
    return dout * mask


# ------------------------------------------------------------------------ affine


def affine_forward(x, W, b=None):
    _check_2d("x", x)
    _check_2d("W", W)
    if x.shape[1] != W.shape[0]:
        raise KernelError(f"affine: x {x.shape} incompatible with W {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise KernelError(f"affine: bias {b.shape} != ({W.shape[1]},)")
    out = x @ W
    if b is not None:
        out = out + b
    return out, (x, W, b is not None)


def affine_backward(dout, cache, row_weights=None):
    """Gradients (dx, dW, db); ``row_weights`` rescales each row's contribution to dW/db."""
    x, W, has_b = cache
    if dout.shape != (x.shape[0], W.shape[1]):
        raise KernelError(f"affine grad shape {dout.shape} != {(x.shape[0], W.shape[1])}")
    dx = dout @ W.T
    dw_rows = dout if row_weights is None else dout * row_weights[:, None]
    dW = x.T @ dw_rows
    db = dw_rows.sum(axis=0) if has_b else None
    return dx, dW, db


# -------------------------------------------------------------- sparse propagate


def spmm_forward(A: sp.spmatrix, X):
    _check_2d("X", X)
    if A.shape[1] != X.shape[0]:
        raise KernelError(f"spmm: A {A.shape} incompatible with X {X.shape}")
    return np.asarray(A @ X), A


def spmm_backward(dout, A):
    if dout.shape[0] != A.shape[0]:
        raise KernelError(f"spmm grad rows {dout.shape[0]} != {A.shape[0]}")
    return np.asarray(A.T @ dout)


# ---------------------------------------------------------------- softmax + NLL


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def softmax_xent_forward(logits, labels, rows=None):
    """Mean cross-entropy of ``logits[rows]`` against ``labels[rows]``.

    ``rows`` selects the supervised rows (all rows when None); the gradient is
    zero elsewhere.
    """
    _check_2d("logits", logits)
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise KernelError(f"labels shape {labels.shape} != ({logits.shape[0]},)")
    rows = np.arange(logits.shape[0]) if rows is None else np.asarray(rows)
    if rows.size == 0:
        raise KernelError("softmax_xent on empty row set")
    logp = log_softmax(logits[rows])
    y = labels[rows]
    if y.min() < 0 or y.max() >= logits.shape[1]:
        raise KernelError("label outside logit columns")
    loss = -logp[np.arange(rows.size), y].mean()
    return float(loss), (logp, y, rows, logits.shape)


def softmax_xent_backward(cache):
    logp, y, rows, shape = cache
    g = np.exp(logp)
    g[np.arange(rows.size), y] -= 1.0
    d = np.zeros(shape)
    d[rows] = g / rows.size
    return d


# ------------------------------------------------------------------ parameters


class ParamVector:
    """Flat float64 parameter vector with a (name, shape) registry.

    ``self[name]`` returns a writable view into ``data``, so models read their
    tensors straight out of the flat buffer and optimizer updates are visible
    without copying.
    """

    def __init__(self, registry, data=None):
        self.registry = [(str(name), tuple(int(s) for s in shape)) for name, shape in registry]
        self._offsets = {}
        off = 0
        for name, shape in self.registry:
            if name in self._offsets:
                raise KernelError(f"duplicate parameter name {name!r}")
            size = math.prod(shape)
            self._offsets[name] = (off, off + size, shape)
            off += size
        self.size = off
        if data is None:
            data = np.zeros(off)
        data = np.asarray(data, dtype=np.float64)
        if data.shape != (off,):
            raise KernelError(f"parameter data length {data.shape} != {off}")
        self.data = data

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> ParamVector:
        pv = cls([(k, np.shape(v)) for k, v in arrays.items()])
        for k, v in arrays.items():
            pv[k][...] = v
        return pv

    def __getitem__(self, name: str) -> np.ndarray:
        lo, hi, shape = self._offsets[name]
        return self.data[lo:hi].reshape(shape)

    def __len__(self) -> int:
        return self.size

    def names(self) -> list[str]:
        return [n for n, _ in self.registry]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {n: self[n].copy() for n in self.names()}

    def flatten_grads(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        out = np.zeros(self.size)
        for name, g in grads.items():
            lo, hi, shape = self._offsets[name]
            if np.shape(g) != shape:
                raise KernelError(f"gradient for {name} has shape {np.shape(g)}, expected {shape}")
            out[lo:hi] = np.ravel(g)
        return out

    def slice_of(self, index: int) -> str:
        for name, (lo, hi, _) in self._offsets.items():
            if lo <= index < hi:
                return name
        raise IndexError(index)

    def same_layout(self, other: ParamVector) -> bool:
        return self.registry == other.registry

    def copy(self) -> ParamVector:
        return ParamVector(self.registry, self.data.copy())

    def with_data(self, data) -> ParamVector:
        return ParamVector(self.registry, np.array(data, dtype=np.float64))


def glorot(rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


# ------------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int, lr: float = 0.01, **kw) -> AdamState:
        return cls(np.zeros(size), np.zeros(size), lr=lr, **kw)


def adam_step(p: ParamVector, g: np.ndarray, s: AdamState, weight_decay: float = 0.0):
    """In-place bias-corrected Adam update; returns ``(p, s)``.

    ``weight_decay`` adds an L2 term ``weight_decay * p`` to the gradient.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.shape != p.data.shape or s.m.shape != p.data.shape:
        raise OptimizerError(f"gradient/state length mismatch with {p.data.shape}")
    bad = np.flatnonzero(~np.isfinite(g))
    if bad.size:
        raise OptimizerError(f"non-finite gradient in parameter slice {p.slice_of(int(bad[0]))!r}")
    if weight_decay:
        g = g + weight_decay * p.data
    s.t += 1
    s.m *= s.beta1
    s.m += (1.0 - s.beta1) * g
    s.v *= s.beta2
    s.v += (1.0 - s.beta2) * g * g
    m_hat = s.m / (1.0 - s.beta1**s.t)
    v_hat = s.v / (1.0 - s.beta2**s.t)
    p.data -= s.lr * m_hat / (np.sqrt(v_hat) + s.eps)
    if not np.all(np.isfinite(p.data)):
        bad = int(np.flatnonzero(~np.isfinite(p.data))[0])
        raise OptimizerError(f"parameter slice {p.slice_of(bad)!r} became non-finite")
    return p, s
