"""Class-aware memory: a bank of normal prototypes with per-prototype class
logits, cosine-attention retrieval and hard shrinkage of the weights."""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import functional as F
from .tensor import Tensor, absolute, as_tensor, matmul, parameter, where
from .vit import Module

logger = logging.getLogger(__name__)


class MemoryBank(Module):
    """``N`` prototypes of width ``c`` plus an ``N x D`` matrix of class logits."""

    def __init__(self, num_slots: int, dim: int, num_classes: int, seed: int = 0,
                 shrink_threshold: float | None = None, eps: float = 1e-12, dtype=np.float32):
        if num_slots < 1:
            raise ValueError("memory needs at least one slot")
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(dim)
        self.M = parameter(rng.uniform(-bound, bound, size=(num_slots, dim)).astype(dtype))
        self.P = parameter(np.zeros((num_slots, num_classes), dtype=dtype))
        self.shrink_threshold = 1.0 / num_slots if shrink_threshold is None else float(shrink_threshold)
        self.eps = eps

    @property
    def num_slots(self) -> int:
        return self.M.shape[0]

    def forward(self, tokens: Tensor) -> tuple[Tensor, Tensor]:
        return retrieve(tokens, self)


def attention_weights(tokens: Tensor, bank: MemoryBank) -> Tensor:
    """Softmax over slots of the cosine similarity between tokens and prototypes."""
    tokens = as_tensor(tokens)
    dot = matmul(tokens, bank.M.transpose())
    den = F.norm(tokens, axis=-1, keepdims=True) * F.norm(bank.M, axis=-1) + F.EPS
    return F.softmax(dot / den, axis=-1)


def hard_shrink(w: Tensor, threshold: float, eps: float = 1e-12) -> Tensor:
    """Zero weights at or below ``threshold`` and renormalise each row.

    Uses ``relu(w - t) * w / (|w - t| + eps)``. Rows where every weight is
    shrunk away keep their original weights.
    """
    w = as_tensor(w)
    d = w - threshold
    shrunk = F.relu(d) * w / (absolute(d) + eps)
    total = shrunk.sum(axis=-1, keepdims=True)
    empty = total.data <= 0
    if empty.any():
        logger.debug("hard_shrink: %d rows fell back to unshrunk weights", int(empty.sum()))
    normed = shrunk / (total + empty.astype(w.dtype))
    return where(np.broadcast_to(empty, w.shape), w, normed)


def retrieve(tokens: Tensor, bank: MemoryBank) -> tuple[Tensor, Tensor]:
    """Replace every token by the shrunk convex combination of prototypes.

    Returns the replaced tokens ``[bs, T, c]`` and the weights ``[bs, T, N]``.
    """
    w = attention_weights(tokens, bank)
    w_hat = hard_shrink(w, bank.shrink_threshold, bank.eps)
    return matmul(w_hat, bank.M), w_hat


def class_predict(w_hat: Tensor, bank: MemoryBank) -> Tensor:
    """Token class logits as the weight-averaged prototype logits."""
    return matmul(w_hat, bank.P)


def classification_loss(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Cross-entropy of every token against its image label, averaged over
    tokens and batch."""
    labels = np.asarray(labels, dtype=int).reshape(-1)
    n_cls = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_cls):
        raise ValueError(f"labels must lie in [0, {n_cls - 1}], got {labels.tolist()}")
    onehot = np.eye(n_cls, dtype=logits.dtype)[labels]
    onehot = onehot.reshape((logits.shape[0],) + (1,) * (logits.ndim - 2) + (n_cls,))
    picked = (logits * onehot).sum(axis=-1)
    return (F.logsumexp(logits, axis=-1) - picked).mean()


class UtilizationTracker:
    """Accumulates mean retrieval weights per category over an evaluation pass."""

    def __init__(self, categories: Sequence[str], num_slots: int):
        self.categories = list(categories)
        self.sums = {c: np.zeros(num_slots) for c in self.categories}
        self.counts = {c: 0 for c in self.categories}

    def update(self, category: str, w_hat: np.ndarray) -> None:
        w = np.asarray(w_hat, dtype=np.float64).reshape(-1, w_hat.shape[-1])
        self.sums[category] += w.sum(axis=0)
        self.counts[category] += w.shape[0]

    def table(self) -> dict[str, np.ndarray]:
        return _mean_rows(self.sums, self.counts)


def utilization_stats(samples: Mapping[str, Sequence[np.ndarray]], num_slots: int) -> dict[str, np.ndarray]:
    """Mean retrieval weight of every prototype, per category."""
    tracker = UtilizationTracker(list(samples), num_slots)
    for cat, arrays in samples.items():
        for w in arrays:
            tracker.update(cat, w)
    return tracker.table()


def _mean_rows(sums: Mapping[str, np.ndarray], counts: Mapping[str, int]) -> dict[str, np.ndarray]:
    out = {}
    for cat, s in sums.items():
        if counts[cat] == 0:
            logger.warning("no retrieval weights recorded for category %s", cat)
            out[cat] = np.zeros_like(s)
        else:
            out[cat] = s / counts[cat]
    return out


def write_utilization_csv(table: Mapping[str, np.ndarray], path: str | Path) -> None:
    path = Path(path)
    n = len(next(iter(table.values()))) if table else 0
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["category"] + [f"proto_{i}" for i in range(n)])
        for cat, row in table.items():
            writer.writerow([cat] + [f"{v:.8g}" for v in row])
