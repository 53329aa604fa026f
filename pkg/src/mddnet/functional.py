"""Differentiable kernels used by the model: activations, normalisation,
cosine distances and bilinear resampling."""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .tensor import Tensor, _check_axis, _make, as_tensor

EPS = 1e-8

_SQRT1_2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def _single_axis(axis: int, ndim: int) -> int:
    return _check_axis(axis, ndim)[0]


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT1_2))
    out = (x.data * cdf).astype(x.dtype)

    def fn(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _make(out, (x,), fn, "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _single_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return _make(y, (x,), fn, "softmax")


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    ax = _single_axis(axis, x.ndim)
    m = x.data.max(axis=ax, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=ax, keepdims=True)
    out = np.squeeze(np.log(s) + m, axis=ax)
    p = e / s
    return _make(out, (x,), lambda g: (np.expand_dims(g, ax) * p,), "logsumexp")


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               axis: int = -1, eps: float = 1e-6) -> Tensor:
    """Normalise each slice along ``axis`` to zero mean and unit variance,
    then apply the optional per-feature affine map."""
    ax = _single_axis(axis, x.ndim)
    mu = x.data.mean(axis=ax, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    bshape = [1] * x.ndim
    bshape[ax] = x.shape[ax]
    w = weight.data.reshape(bshape) if weight is not None else None
    out = xhat * w if w is not None else xhat
    if bias is not None:
        out = out + bias.data.reshape(bshape)
    red = tuple(i for i in range(x.ndim) if i != ax)

    def fn(g):
        gx = g * w if w is not None else g
        dx = inv * (gx - gx.mean(axis=ax, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=ax, keepdims=True))
        grads = [dx]
        if weight is not None:
            grads.append((g * xhat).sum(axis=red).reshape(weight.shape))
        if bias is not None:
            grads.append(g.sum(axis=red).reshape(bias.shape))
        return grads

    inputs = [x] + [t for t in (weight, bias) if t is not None]
    return _make(out.astype(x.dtype), inputs, fn, "layer_norm")


def normalize_activate(x: Tensor, kind: str, axis: int = -1, weight: Tensor | None = None,
                       bias: Tensor | None = None) -> Tensor:
    if kind == "layer_norm":
        return layer_norm(x, weight, bias, axis=axis)
    if kind == "softmax":
        return softmax(x, axis=axis)
    if kind == "gelu":
        return gelu(x)
    if kind == "relu":
        return relu(x)
    raise ValueError(f"unknown activation {kind!r}")


def norm(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is zero."""
    ax = _single_axis(axis, x.ndim)
    n = np.sqrt((x.data * x.data).sum(axis=ax, keepdims=True))
    safe = np.where(n > 0, n, 1.0)
    unit = np.where(n > 0, x.data / safe, 0.0)
    out = n if keepdims else np.squeeze(n, axis=ax)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (g * unit,)

    return _make(out, (x,), fn, "norm")


def cosine_map(a: Tensor, b: Tensor, axis: int = 1, eps: float = EPS) -> Tensor:
    """``1 - <a, b> / (|a| |b| + eps)`` along ``axis`` (channels by default).

    The forward value is clipped to [0, 2] against rounding; the backward
    pass uses the unclipped expression.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"cosine_map needs identical shapes, got {a.shape} and {b.shape}")
    ax = _single_axis(axis, a.ndim)
    dot = (a.data * b.data).sum(axis=ax, keepdims=True)
    na = np.sqrt((a.data * a.data).sum(axis=ax, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(axis=ax, keepdims=True))
    den = na * nb + eps
    cos = dot / den
    out = np.squeeze(1.0 - np.clip(cos, -1.0, 1.0), axis=ax).astype(a.dtype)

    def fn(g):
        g = -np.expand_dims(g, ax)
        ua = np.where(na > 0, a.data / np.where(na > 0, na, 1.0), 0.0)
        ub = np.where(nb > 0, b.data / np.where(nb > 0, nb, 1.0), 0.0)
        ga = g * (b.data / den - dot / (den * den) * nb * ua)
        gb = g * (a.data / den - dot / (den * den) * na * ub)
        return ga, gb

    return _make(out, (a, b), fn, "cosine_map")


def _bilinear_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    """Interpolation weights for one axis with align_corners=False."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=np.float64)
    np.add.at(m, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    return m.astype(dtype)


def bilinear_resize(x: Tensor, target: tuple[int, int]) -> Tensor:
    """Resize the two trailing axes to ``target`` (align_corners=False)."""
    x = as_tensor(x)
    H, W = int(target[0]), int(target[1])
    if H < 1 or W < 1:
        raise ValueError(f"target size must be positive, got {target}")
    ry = _bilinear_matrix(H, x.shape[-2], x.dtype)
    rx = _bilinear_matrix(W, x.shape[-1], x.dtype)
    out = ry @ x.data @ rx.T
    return _make(out, (x,), lambda g: (ry.T @ g @ rx,), "bilinear_resize")
