"""Training, checkpointing, scoring and evaluation workflows."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .data import (DatasetIndex, TestItem, batch_iterator, load_image, load_mask, normalize_image,
                   save_image, save_mask, scan_dataset)
from .memory import UtilizationTracker, write_utilization_csv
from .metrics import MetricsReport, evaluate
from .model import MDDNet
from .optim import AdamW, step_lr
from .scoring import AnomalyMap, fuse, write_heatmap
from .synth import TexturePool, augment
from .tensor import backward, get_tape
from .weights import load_arrays, save_arrays

logger = logging.getLogger(__name__)

LOSS_LOG_COLUMNS = ("step", "restoration", "identity", "dist", "rec", "cls", "total")
EPOCH_LOG_COLUMNS = ("epoch", "lr", "mean_total", "seconds")


class CheckpointMismatchError(ValueError):
    pass


def build_model(cfg: RunConfig) -> MDDNet:
    return MDDNet(cfg.model, cfg.memory.N, shrink_threshold=cfg.memory.shrink_threshold,
                  shrink_eps=cfg.memory.eps)


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(directory: str | Path, cfg: RunConfig, model: MDDNet, opt: AdamW | None = None,
                    epoch: int = 0, step: int = 0) -> None:
    arrays = {f"model.{n}": p.data for n, p in model.trainable()}
    if opt is not None:
        names = [n for n, _ in model.trainable()]
        for n, m, v in zip(names, opt.state.exp_avg, opt.state.exp_avg_sq):
            arrays[f"optim.exp_avg.{n}"] = m
            arrays[f"optim.exp_avg_sq.{n}"] = v
    meta = {"config": cfg.to_dict(), "config_hash": cfg.architecture_hash(), "epoch": epoch,
            "step": step, "optim_step": opt.state.step if opt is not None else 0}
    save_arrays(arrays, directory, meta)


@dataclass
class Checkpoint:
    config: RunConfig
    model: MDDNet
    epoch: int
    step: int
    optim_step: int
    arrays: dict


def load_checkpoint(directory: str | Path, cfg: RunConfig | None = None) -> Checkpoint:
    """Rebuild the model stored in ``directory``.

    With ``cfg`` the architecture hash must match the stored one; the given
    config then governs non-architectural settings such as ``alpha``.
    """
    arrays, meta = load_arrays(directory)
    stored = RunConfig.from_dict(meta["config"])
    if cfg is not None and cfg.architecture_hash() != meta["config_hash"]:
        raise CheckpointMismatchError(
            f"config hash {cfg.architecture_hash()} does not match checkpoint hash {meta['config_hash']}")
    cfg = cfg or stored
    model = build_model(cfg)
    for name, p in model.trainable():
        p.data[...] = arrays[f"model.{name}"]
    return Checkpoint(cfg, model, meta["epoch"], meta["step"], meta.get("optim_step", 0), arrays)


# -- training --------------------------------------------------------------

def _load_batch(items, size: int) -> np.ndarray:
    return np.stack([load_image(it.path, size, normalize=False) for it in items])


def synthesize(images: np.ndarray, pool: TexturePool, seeds: Sequence, cfg: RunConfig):
    samples = [augment(x, pool, np.random.default_rng(s), cfg=cfg.data.synth) for x, s in zip(images, seeds)]
    x_a = np.stack([s.x_a for s in samples])
    mask = np.stack([s.mask for s in samples])
    return x_a, mask


@dataclass
class TrainResult:
    model: MDDNet
    checkpoint: Path
    loss_log: Path
    steps: int


def train(cfg: RunConfig, out_dir: str | Path, index: DatasetIndex | None = None,
          resume: str | Path | None = None, max_steps: int | None = None,
          progress: Callable[[str], None] | None = None) -> TrainResult:
    """Train on the normal images of ``index`` (scanned from ``cfg.data.root``
    when omitted), writing a checkpoint after every epoch.

    Batch order and synthetic anomalies are seeded per (seed, epoch, batch),
    so a resumed run replays exactly the remaining steps.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = index or scan_dataset(cfg.data.root)
    if len(index.categories) != cfg.model.num_classes:
        raise ValueError(f"dataset has {len(index.categories)} categories but the model expects "
                         f"{cfg.model.num_classes}")
    ckpt_dir = out / "checkpoint"
    start_epoch, step = 0, 0
    if resume is not None:
        ck = load_checkpoint(resume, cfg)
        model = ck.model
        start_epoch, step = ck.epoch, ck.step
    else:
        model = build_model(cfg)
    params = model.trainable()
    opt = AdamW([p for _, p in params], lr=cfg.train.lr, weight_decay=cfg.train.weight_decay)
    if resume is not None:
        opt.state.step = ck.optim_step
        opt.state.exp_avg = [ck.arrays[f"optim.exp_avg.{n}"].copy() for n, _ in params]
        opt.state.exp_avg_sq = [ck.arrays[f"optim.exp_avg_sq.{n}"].copy() for n, _ in params]
    pool = TexturePool(cfg.data.texture_pool)
    size = cfg.model.image_size
    teacher_before = [p.data.copy() for p in model.teacher.parameters()] if __debug__ else None

    loss_log = out / "loss_log.csv"
    epoch_log = out / "epochs.csv"
    mode = "a" if resume is not None and loss_log.exists() else "w"
    with open(loss_log, mode, newline="") as lf, open(epoch_log, mode, newline="") as ef:
        lw, ew = csv.writer(lf), csv.writer(ef)
        if mode == "w":
            lw.writerow(LOSS_LOG_COLUMNS)
            ew.writerow(EPOCH_LOG_COLUMNS)
        for epoch in range(start_epoch, cfg.train.epochs):
            opt.lr = step_lr(cfg.train.lr, epoch, cfg.train.lr_drop_epoch, cfg.train.lr_drop_factor)
            t0 = time.time()
            totals = []
            batches = batch_iterator(index.train, cfg.train.batch_size, shuffle_seed=[cfg.seed, epoch])
            for b, items in enumerate(batches):
                x_n = _load_batch(items, size)
                seeds = [[cfg.seed, epoch, b, i] for i in range(len(items))]
                x_a, mask = synthesize(x_n, pool, seeds, cfg)
                labels = [index.label(it.category) for it in items]
                try:
                    report = model.training_step(normalize_image(x_n), normalize_image(x_a), mask, labels,
                                                 cfg.train.mining_fraction).report
                    opt.zero_grad()
                    backward(report.total)
                    opt.step()
                except FloatingPointError as exc:
                    raise FloatingPointError(f"training aborted at step {step}: {exc}") from exc
                vals = report.values()
                lw.writerow([step] + [f"{vals[k]:.8g}" for k in LOSS_LOG_COLUMNS[1:]])
                totals.append(vals["total"])
                step += 1
                if max_steps is not None and step >= max_steps:
                    break
            lf.flush()
            ew.writerow([epoch + 1, f"{opt.lr:.8g}", f"{np.mean(totals):.8g}", f"{time.time() - t0:.2f}"])
            ef.flush()
            save_checkpoint(ckpt_dir, cfg, model, opt, epoch=epoch + 1, step=step)
            if progress:
                progress(f"epoch {epoch + 1}/{cfg.train.epochs} lr={opt.lr:.2e} loss={np.mean(totals):.4f}")
            if max_steps is not None and step >= max_steps:
                break
    get_tape().clear()
    if teacher_before is not None:
        for a, p in zip(teacher_before, model.teacher.parameters()):
            assert np.array_equal(a, p.data), "teacher parameters changed during training"
    return TrainResult(model, ckpt_dir, loss_log, step)


# -- scoring and evaluation ------------------------------------------------

@dataclass
class ScoredSet:
    """Accumulated RID/TRD maps for a list of test items."""

    items: list[TestItem]
    S_RI: np.ndarray
    S_TR: np.ndarray
    masks: np.ndarray
    utilization: dict

    def fused(self, alpha: float, smoothing_sigma: float = 0.0) -> AnomalyMap:
        return fuse(self.S_RI, self.S_TR, alpha, smoothing_sigma)


def score_items(model: MDDNet, items: Sequence[TestItem], categories: Sequence[str],
                batch_size: int = 16) -> ScoredSet:
    size = model.cfg.image_size
    tracker = UtilizationTracker(categories, model.memory.num_slots)
    s_ri, s_tr, masks = [], [], []
    for chunk in batch_iterator(list(items), batch_size):
        x = np.stack([load_image(it.path, size) for it in chunk])
        out = model.infer(x)
        s_ri.append(out.S_RI)
        s_tr.append(out.S_TR)
        for it, w in zip(chunk, out.w_hat):
            tracker.update(it.category, w)
            masks.append(load_mask(it.mask_path, size) if it.is_anomalous else np.zeros((size, size), np.float32))
    return ScoredSet(list(items), np.concatenate(s_ri), np.concatenate(s_tr), np.stack(masks), tracker.table())


def evaluate_scored(scored: ScoredSet, categories: Sequence[str], alpha: float,
                    smoothing_sigma: float = 0.0, iou_mode: str = "pooled") -> MetricsReport:
    amap = scored.fused(alpha, smoothing_sigma)
    per_cat = {}
    for cat in categories:
        idx = [i for i, it in enumerate(scored.items) if it.category == cat]
        if not idx:
            continue
        labels = np.array([scored.items[i].is_anomalous for i in idx], dtype=int)
        masks = scored.masks[idx]
        has_masks = bool(masks.any())
        if not has_masks:
            logger.warning("category %s has no ground-truth masks; pixel metrics skipped", cat)
        per_cat[cat] = {"scores": np.atleast_1d(amap.s)[idx], "labels": labels,
                        "maps": amap.S[idx], "masks": masks if has_masks else None}
    return evaluate(per_cat, iou_mode=iou_mode)


def run_eval(cfg: RunConfig, checkpoint: str | Path, out_dir: str | Path,
             index: DatasetIndex | None = None, alpha: float | None = None) -> MetricsReport:
    """Score every test image, write ``metrics.csv`` and ``utilization.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ck = load_checkpoint(checkpoint, cfg)
    index = index or scan_dataset(cfg.data.root)
    scored = score_items(ck.model, index.test, index.categories)
    a = cfg.score.alpha if alpha is None else alpha
    report = evaluate_scored(scored, index.categories, a, cfg.score.smoothing_sigma, cfg.score.iou_mode)
    report.write_csv(out / "metrics.csv")
    write_utilization_csv(scored.utilization, out / "utilization.csv")
    return report


def run_infer(cfg: RunConfig | None, checkpoint: str | Path, inputs: Sequence[str | Path],
              out_dir: str | Path, alpha: float | None = None, raw: bool = False) -> list[dict]:
    """Heatmap PNG plus JSON sidecar for every input image."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ck = load_checkpoint(checkpoint, cfg)
    cfg = ck.config
    a = cfg.score.alpha if alpha is None else alpha
    results = []
    for path in inputs:
        path = Path(path)
        x = load_image(path, cfg.model.image_size)[None]
        out_map = ck.model.infer(x)
        amap = fuse(out_map.S_RI[0], out_map.S_TR[0], a, cfg.score.smoothing_sigma)
        meta = write_heatmap(amap, out / f"{path.stem}.png", raw=raw)
        meta["image"] = str(path)
        results.append(meta)
    return results


def sweep_memory(cfg: RunConfig, sizes: Sequence[int], out_dir: str | Path,
                 index: DatasetIndex | None = None, progress=None) -> list[dict]:
    """Train and evaluate once per memory size with a shared seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = index or scan_dataset(cfg.data.root)
    rows = []
    for n in sizes:
        run_cfg = RunConfig.from_dict(cfg.to_dict())
        run_cfg.memory.N = int(n)
        run_dir = out / f"N{n}"
        result = train(run_cfg, run_dir, index=index, progress=progress)
        report = run_eval(run_cfg, result.checkpoint, run_dir, index=index)
        avg = report.average()
        rows.append({"N": int(n), "lambda": run_cfg.memory.shrink_threshold,
                     "image_mAUROC": avg["image"]["auroc"], "pixel_mAUPRO": avg["pixel"].get("aupro", math.nan)})
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["N", "lambda", "image_mAUROC", "pixel_mAUPRO"])
        for r in rows:
            writer.writerow([r["N"], f"{r['lambda']:.8g}", f"{r['image_mAUROC']:.6f}", f"{r['pixel_mAUPRO']:.6f}"])
    return rows


def synth_preview(cfg: RunConfig, n: int, out_dir: str | Path, index: DatasetIndex | None = None) -> list[Path]:
    """Write ``n`` (normal, anomalous, mask) triptychs side by side."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    size = cfg.model.image_size
    pool = TexturePool(cfg.data.texture_pool)
    rng = np.random.default_rng(cfg.seed)
    sources = None
    if index is None and cfg.data.root:
        index = scan_dataset(cfg.data.root)
    if index is not None:
        sources = index.train
    written = []
    for i in range(n):
        if sources:
            x = load_image(sources[i % len(sources)].path, size, normalize=False)
        else:
            from .synth import procedural_texture
            x = procedural_texture(size, size, rng)
        sample = augment(x, pool, np.random.default_rng([cfg.seed, i]), cfg=cfg.data.synth)
        stem = out / f"triptych_{i:03d}"
        mask_rgb = np.repeat(sample.mask[None], 3, axis=0)
        save_image(np.concatenate([sample.x_n, sample.x_a, mask_rgb], axis=2), stem.with_suffix(".png"))
        save_mask(sample.mask, out / f"mask_{i:03d}.png")
        written.append(stem.with_suffix(".png"))
    return written
