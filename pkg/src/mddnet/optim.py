"""AdamW with decoupled weight decay and a step learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: list[np.ndarray] = field(default_factory=list)
    exp_avg_sq: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamWState":
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: AdamWState,
               lr: float = 1e-4, weight_decay: float = 1e-4, betas=(0.9, 0.999),
               eps: float = 1e-8) -> None:
    """Update ``params`` and ``state`` in place.

    A missing gradient is treated as zero. Any non-finite gradient rejects the
    whole step before anything is modified.
    """
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {i}; step rejected")
    if not state.exp_avg:
        state.exp_avg = [np.zeros_like(p) for p in params]
        state.exp_avg_sq = [np.zeros_like(p) for p in params]
    b1, b2 = betas
    state.step += 1
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        if g is None:
            g = np.zeros_like(p)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        denom = np.sqrt(v / bc2) + eps
        p -= (lr * (m / bc1) / denom).astype(p.dtype)


class AdamW:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, weight_decay: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = tuple(betas)
        self.eps = eps
        self.state = AdamWState.zeros_like([p.data for p in self.params])

    def step(self) -> None:
        adamw_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                   lr=self.lr, weight_decay=self.weight_decay, betas=self.betas, eps=self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def step_lr(base_lr: float, epoch: int, drop_epoch: int, drop_factor: float = 0.1) -> float:
    """Learning rate for a zero-based ``epoch``: multiplied by ``drop_factor``
    from ``drop_epoch`` onwards."""
    return base_lr * drop_factor if epoch >= drop_epoch else base_lr
