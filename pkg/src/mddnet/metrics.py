"""Image- and pixel-level detection metrics.

All threshold sweeps enumerate the distinct score values exactly; a sample is
predicted anomalous when its score is >= the threshold.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

IMAGE_METRICS = ("auroc", "ap", "f1_max")
PIXEL_METRICS = ("auroc", "ap", "f1_max", "aupro", "iou_max")
CSV_COLUMNS = (
    "category",
    "image_mAUROC", "image_mAP", "image_mF1max",
    "pixel_mAUROC", "pixel_mAP", "pixel_mF1max", "pixel_mAUPRO", "pixel_mIoUmax",
)


def _prepare(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(bool)


def threshold_counts(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """True and false positive counts at every distinct threshold, from the
    highest score down. Returns ``(thresholds, tp, fp)``."""
    s, y = _prepare(scores, labels)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    return s[last], tp[last], fp[last]


def auroc(scores, labels) -> float:
    """Probability that a positive outscores a negative, ties counting half."""
    s, y = _prepare(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both positive and negative labels")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    _, tp, fp = threshold_counts(scores, labels)
    n_pos = tp[-1]
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive label")
    recall_step = np.diff(np.r_[0, tp]) / n_pos
    precision = tp / (tp + fp)
    return float(np.sum(recall_step * precision))


def f1_max(scores, labels) -> float:
    _, tp, fp = threshold_counts(scores, labels)
    n_pos = tp[-1]
    if n_pos == 0:
        raise ValueError("F1 needs at least one positive label")
    fn = n_pos - tp
    return float(np.max(2 * tp / (2 * tp + fp + fn)))


def iou_max(scores, labels) -> float:
    """Best intersection-over-union of the thresholded scores with the labels."""
    _, tp, fp = threshold_counts(scores, labels)
    n_pos = tp[-1]
    if n_pos == 0:
        raise ValueError("IoU needs a non-empty ground truth")
    return float(np.max(tp / (n_pos + fp)))


def iou_max_per_image(score_maps, gt_masks) -> float:
    """Shared threshold sweep; IoU averaged over images with non-empty ground
    truth at each threshold; best average returned."""
    maps = np.asarray(score_maps, dtype=np.float64)
    masks = np.asarray(gt_masks).astype(bool)
    keep = masks.reshape(len(masks), -1).any(axis=1)
    if not keep.any():
        raise ValueError("IoU needs a non-empty ground truth")
    maps, masks = maps[keep], masks[keep]
    thresholds = np.unique(maps)
    best = 0.0
    for t in thresholds:
        pred = maps >= t
        inter = (pred & masks).reshape(len(maps), -1).sum(axis=1)
        union = (pred | masks).reshape(len(maps), -1).sum(axis=1)
        best = max(best, float(np.mean(inter / union)))
    return best


_EIGHT = np.ones((3, 3), dtype=int)


def connected_components(mask) -> tuple[np.ndarray, int]:
    """8-connected labelling; labels 1..n in row-major order of discovery."""
    labels, n = ndimage.label(np.asarray(mask).astype(bool), structure=_EIGHT)
    return labels, int(n)


def pro_curve(score_maps, gt_masks) -> tuple[np.ndarray, np.ndarray]:
    """False-positive rate and mean per-region overlap at every distinct
    threshold, starting from the empty prediction at (0, 0)."""
    maps = np.asarray(score_maps, dtype=np.float64)
    masks = np.asarray(gt_masks).astype(bool)
    if maps.ndim == 2:
        maps, masks = maps[None], masks[None]
    if maps.shape != masks.shape:
        raise ValueError(f"score maps {maps.shape} and masks {masks.shape} differ")
    region = np.zeros(masks.shape, dtype=np.int64)
    offset = 0
    for i, m in enumerate(masks):
        lab, n = connected_components(m)
        region[i] = np.where(lab > 0, lab + offset, 0)
        offset += n
    n_regions = offset
    if n_regions == 0:
        raise ValueError("AUPRO needs at least one ground-truth region")
    normal = ~masks.reshape(-1)
    n_normal = int(normal.sum())
    if n_normal == 0:
        raise ValueError("AUPRO needs anomaly-free pixels to measure false positives")
    sizes = np.bincount(region.reshape(-1), minlength=n_regions + 1).astype(np.float64)
    rid = region.reshape(-1)
    weight = np.where(rid > 0, 1.0 / (sizes[rid] * n_regions), 0.0)
    s = maps.reshape(-1)
    order = np.argsort(-s, kind="stable")
    fp = np.cumsum(normal[order])
    pro = np.cumsum(weight[order])
    last = np.r_[np.nonzero(np.diff(s[order]))[0], s.size - 1]
    return np.r_[0.0, fp[last] / n_normal], np.r_[0.0, pro[last]]


def area_to_limit(x: np.ndarray, y: np.ndarray, limit: float) -> float:
    """Trapezoidal area under ``y(x)`` for x in [0, limit]; ``x`` ascending."""
    area = 0.0
    for i in range(1, len(x)):
        x0, x1, y0, y1 = x[i - 1], x[i], y[i - 1], y[i]
        if x0 >= limit:
            break
        if x1 > limit:
            y1 = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
            x1 = limit
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def aupro(score_maps, gt_masks, fpr_limit: float = 0.3) -> float:
    """Area under the per-region-overlap curve up to ``fpr_limit``, divided
    by ``fpr_limit``."""
    fpr, pro = pro_curve(score_maps, gt_masks)
    return float(area_to_limit(fpr, pro, fpr_limit) / fpr_limit)


def image_metrics(scores, labels) -> dict[str, float]:
    return {"auroc": auroc(scores, labels), "ap": average_precision(scores, labels),
            "f1_max": f1_max(scores, labels)}


def pixel_metrics(score_maps, gt_masks, iou_mode: str = "pooled", fpr_limit: float = 0.3) -> dict[str, float]:
    maps = np.asarray(score_maps, dtype=np.float64)
    masks = np.asarray(gt_masks).astype(bool)
    s, y = maps.reshape(-1), masks.reshape(-1)
    if iou_mode == "pooled":
        iou = iou_max(s, y)
    elif iou_mode == "per_image":
        iou = iou_max_per_image(maps, masks)
    else:
        raise ValueError(f"unknown IoU mode {iou_mode!r}")
    return {"auroc": auroc(s, y), "ap": average_precision(s, y), "f1_max": f1_max(s, y),
            "aupro": aupro(maps, masks, fpr_limit), "iou_max": iou}


@dataclass
class MetricsReport:
    """Per-category image and pixel metrics plus their macro average."""

    image: dict[str, dict[str, float]] = field(default_factory=dict)
    pixel: dict[str, dict[str, float]] = field(default_factory=dict)

    @property
    def categories(self) -> list[str]:
        return list(self.image)

    def average(self) -> dict[str, dict[str, float]]:
        img = {k: float(np.mean([r[k] for r in self.image.values()])) for k in IMAGE_METRICS}
        pix = {}
        rows = [r for r in self.pixel.values() if r]
        if rows:
            pix = {k: float(np.mean([r[k] for r in rows])) for k in PIXEL_METRICS}
        return {"image": img, "pixel": pix}

    def rows(self) -> list[list]:
        out = []
        avg = self.average()
        entries = [(c, self.image[c], self.pixel.get(c, {})) for c in self.categories]
        entries.append(("Avg", avg["image"], avg["pixel"]))
        for name, img, pix in entries:
            out.append([name] + [img.get(k) for k in IMAGE_METRICS] + [pix.get(k) for k in PIXEL_METRICS])
        return out

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for row in self.rows():
                writer.writerow([row[0]] + ["" if v is None else f"{v:.6f}" for v in row[1:]])


def evaluate(per_category: Mapping[str, dict], iou_mode: str = "pooled") -> MetricsReport:
    """``per_category[name]`` holds ``scores``, ``labels`` and optionally
    ``maps`` and ``masks``; pixel metrics are skipped without masks."""
    report = MetricsReport()
    for cat in sorted(per_category):
        d = per_category[cat]
        report.image[cat] = image_metrics(d["scores"], d["labels"])
        if d.get("masks") is not None:
            report.pixel[cat] = pixel_metrics(d["maps"], d["masks"], iou_mode=iou_mode)
    return report


def read_report_csv(path: str | Path) -> list[dict[str, str]]:
    with Path(path).open() as fh:
        return list(csv.DictReader(fh))

