"""Anomaly maps from decoder discrepancies: per-stage cosine maps, upsampled
accumulation, linear fusion and the image-level max score."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .functional import bilinear_resize, cosine_map
from .tensor import Tensor, no_grad

# Fusion ratio reported per benchmark.
DATASET_ALPHA = {"mvtec": 0.4, "visa": 0.4, "real_iad": 0.1, "uni_medical": 0.5}


@dataclass
class AnomalyMap:
    S: np.ndarray
    s: float
    S_RI: np.ndarray
    S_TR: np.ndarray
    alpha: float


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def stage_maps(teacher: Sequence, restored: Sequence, identity: Sequence
               ) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Cosine distance maps restoration-vs-identity and teacher-vs-restoration,
    one per stage at its native resolution."""
    if not len(teacher) == len(restored) == len(identity):
        raise ValueError("pyramids have different stage counts")
    rid, trd = [], []
    with no_grad():
        for i, (t, r, d) in enumerate(zip(teacher, restored, identity)):
            t, r, d = _arr(t), _arr(r), _arr(d)
            if not t.shape == r.shape == d.shape:
                raise ValueError(f"stage {i + 1} shapes differ: {t.shape}, {r.shape}, {d.shape}")
            rid.append(cosine_map(Tensor(r), Tensor(d)).data)
            trd.append(cosine_map(Tensor(t), Tensor(r)).data)
    return rid, trd


def accumulate(maps: Sequence, image_size: int | tuple[int, int]) -> np.ndarray:
    """Sum of the maps after bilinear upsampling to the image size."""
    size = (image_size, image_size) if np.isscalar(image_size) else tuple(image_size)
    total = None
    with no_grad():
        for m in maps:
            up = bilinear_resize(Tensor(_arr(m)), size).data
            total = up if total is None else total + up
    return total


def fuse(S_RI: np.ndarray, S_TR: np.ndarray, alpha: float, smoothing_sigma: float = 0.0) -> AnomalyMap:
    """``alpha * S_RI + (1 - alpha) * S_TR``; the image score is the map maximum."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    S_RI, S_TR = np.asarray(S_RI), np.asarray(S_TR)
    if alpha == 1.0:
        S = S_RI.copy()
    elif alpha == 0.0:
        S = S_TR.copy()
    else:
        S = alpha * S_RI + (1.0 - alpha) * S_TR
    if smoothing_sigma > 0:
        axes = (-2, -1)
        S = gaussian_filter(S, sigma=smoothing_sigma, axes=axes)
    s = S.reshape(S.shape[:-2] + (-1,)).max(axis=-1)
    return AnomalyMap(S=S, s=float(s) if np.ndim(s) == 0 else s, S_RI=S_RI, S_TR=S_TR, alpha=float(alpha))


def write_heatmap(amap: AnomalyMap, path: str | Path, raw: bool = False) -> dict:
    """16-bit PNG of the min-max normalised map plus a JSON sidecar.

    With ``raw`` the float map is also written as little-endian float32
    preceded by a uint32 rank and uint32 dimensions.
    """
    path = Path(path)
    S = np.asarray(amap.S, dtype=np.float64)
    lo, hi = float(S.min()), float(S.max())
    span = hi - lo
    norm = (S - lo) / span if span > 0 else np.zeros_like(S)
    Image.fromarray(np.round(norm * 65535).astype(np.uint16)).save(path)
    meta = {"min": lo, "max": hi, "alpha": amap.alpha, "s": float(amap.s)}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))
    if raw:
        write_raw_map(S, path.with_suffix(".f32"))
    return meta


def write_raw_map(arr: np.ndarray, path: str | Path) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_raw_map(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    ndim = struct.unpack_from("<I", buf, 0)[0]
    shape = struct.unpack_from(f"<{ndim}I", buf, 4)
    return np.frombuffer(buf, dtype="<f4", offset=4 + 4 * ndim).reshape(shape).copy()
