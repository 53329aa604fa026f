"""Central finite-difference checks for the autograd engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, get_tape, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max-norm error scaled by the larger gradient magnitude."""
    diff = np.max(np.abs(analytic - numeric)) if analytic.size else 0.0
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), floor)
    return float(diff / scale)


def numeric_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5,
                 indices: Sequence[tuple] | None = None) -> np.ndarray:
    """Central differences of the scalar ``fn()`` wrt the entries of ``x``.

    When ``indices`` is given only those entries are perturbed; the others are
    left as NaN in the result.
    """
    out = np.full(x.shape, np.nan) if indices is not None else np.zeros(x.shape)
    targets = indices if indices is not None else list(np.ndindex(*x.shape))
    with no_grad():
        for idx in targets:
            orig = x.data[idx].copy()
            x.data[idx] = orig + h
            fp = float(fn().data)
            x.data[idx] = orig - h
            fm = float(fn().data)
            x.data[idx] = orig
            out[idx] = (fp - fm) / (2 * h)
    return out


def analytic_grads(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    get_tape().clear()
    backward(fn())
    return [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in params]


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                    max_entries: int | None = None, seed: int = 0) -> list[float]:
    """Relative error per parameter between backward and finite differences.

    ``max_entries`` caps how many coordinates of each parameter are probed.
    """
    rng = np.random.default_rng(seed)
    grads = analytic_grads(fn, params)
    errors = []
    for p, g in zip(params, grads):
        indices = None
        if max_entries is not None and p.size > max_entries:
            flat = rng.choice(p.size, size=max_entries, replace=False)
            indices = [np.unravel_index(i, p.shape) for i in flat]
        num = numeric_grad(fn, p, h=h, indices=indices)
        if indices is None:
            errors.append(relative_error(g, num))
        else:
            sel = tuple(np.array(indices).T)
            errors.append(relative_error(g[sel], num[sel]))
    return errors
