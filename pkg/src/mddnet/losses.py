"""Training objectives: cosine feature-alignment losses with hard example
mining, the decoder discrepancy loss and the unweighted total."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .functional import cosine_map
from .tensor import Tensor, absolute, as_tensor, mul


@dataclass
class LossReport:
    restoration: Tensor
    identity: Tensor
    dist: Tensor
    rec: Tensor
    cls: Tensor
    total: Tensor

    COMPONENTS = ("restoration", "identity", "dist", "rec", "cls")

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data) for k in self.COMPONENTS + ("total",)}


def hard_example_filter(distance_map: np.ndarray, fraction: float) -> np.ndarray:
    """Boolean mask keeping the ``ceil(fraction * h * w)`` largest distances
    of every map in a ``[bs, h, w]`` (or ``[h, w]``) array.

    Ties are resolved in favour of the lower flat index.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"mining fraction must lie in (0, 1], got {fraction}")
    d = np.asarray(distance_map)
    squeeze = d.ndim == 2
    if squeeze:
        d = d[None]
    flat = d.reshape(d.shape[0], -1)
    n = flat.shape[1]
    keep = math.ceil(fraction * n)
    mask = np.zeros(flat.shape, dtype=bool)
    if keep >= n:
        mask[:] = True
    else:
        order = np.argsort(-flat, axis=1, kind="stable")[:, :keep]
        np.put_along_axis(mask, order, True, axis=1)
    mask = mask.reshape(d.shape)
    return mask[0] if squeeze else mask


def _check_stages(a: Sequence[Tensor], b: Sequence[Tensor]) -> None:
    if len(a) != len(b):
        raise ValueError(f"stage count mismatch: {len(a)} vs {len(b)}")
    for i, (x, y) in enumerate(zip(a, b)):
        if x.shape != y.shape:
            raise ValueError(f"stage {i + 1} shape mismatch: {x.shape} vs {y.shape}")


def mined_mean(distance: Tensor, fraction: float) -> Tensor:
    """Mean of ``distance`` over the locations kept by hard example mining."""
    mask = hard_example_filter(distance.data, fraction)
    if mask.all():
        return distance.mean()
    return mul(distance, mask.astype(distance.dtype)).sum() / float(mask.sum())


def cosine_alignment_loss(pred: Sequence[Tensor], target: Sequence[Tensor],
                          mining_fraction: float = 1.0) -> Tensor:
    """Sum over stages of the mean per-location channel cosine distance."""
    _check_stages(pred, target)
    total = None
    for p, t in zip(pred, target):
        term = mined_mean(cosine_map(p, t), mining_fraction)
        total = term if total is None else total + term
    return total


def restoration_loss(restored: Sequence[Tensor], teacher_normal: Sequence[Tensor],
                     mining_fraction: float = 1.0) -> Tensor:
    return cosine_alignment_loss(restored, teacher_normal, mining_fraction)


def identity_loss(identity: Sequence[Tensor], teacher_anomalous: Sequence[Tensor],
                  mining_fraction: float = 1.0) -> Tensor:
    return cosine_alignment_loss(identity, teacher_anomalous, mining_fraction)


def reconstruction_loss(restored_normal: Sequence[Tensor], teacher_normal: Sequence[Tensor],
                        mining_fraction: float = 1.0) -> Tensor:
    return cosine_alignment_loss(restored_normal, teacher_normal, mining_fraction)


def rid_map(restored: Tensor, identity: Tensor) -> Tensor:
    """Per-location cosine distance between the two decoders, ``[bs, h, w]``."""
    return cosine_map(restored, identity)


def downsample_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Average-pool ``[..., H, W]`` masks to ``size``; values stay in [0, 1]."""
    m = np.asarray(mask, dtype=np.float64)
    H, W = m.shape[-2:]
    h, w = size
    if H % h or W % w:
        raise ValueError(f"mask size {H}x{W} is not a multiple of {h}x{w}")
    m = m.reshape(m.shape[:-2] + (h, H // h, w, W // w))
    return m.mean(axis=(-3, -1))


def discrepancy_loss(rid_maps: Sequence[Tensor], mask: np.ndarray) -> Tensor:
    """Sum over stages of the mean absolute error between the decoder
    discrepancy map and the mask pooled to that stage's resolution."""
    total = None
    for m in rid_maps:
        target = downsample_mask(mask, m.shape[-2:]).astype(m.dtype)
        term = absolute(m - target).mean()
        total = term if total is None else total + term
    return total


def total_loss(restoration, identity, dist, rec, cls) -> LossReport:
    parts = dict(restoration=as_tensor(restoration), identity=as_tensor(identity),
                 dist=as_tensor(dist), rec=as_tensor(rec), cls=as_tensor(cls))
    for name, value in parts.items():
        if not np.all(np.isfinite(value.data)):
            raise FloatingPointError(f"loss component {name!r} is not finite")
    total = parts["restoration"] + parts["identity"] + parts["dist"] + parts["rec"] + parts["cls"]
    return LossReport(total=total, **parts)
