"""Synthetic anomalies: Perlin-noise masks blended with texture images."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


class EmptyMaskError(RuntimeError):
    pass


@dataclass
class AnomalySample:
    x_n: np.ndarray  # [3, H, W] in [0, 1]
    x_a: np.ndarray  # [3, H, W] in [0, 1]
    mask: np.ndarray  # [H, W] in {0, 1}
    label: int = 0


def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6 - 15) + 10)


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def perlin_noise(H: int, W: int, scale_y: int, scale_x: int, seed=None) -> np.ndarray:
    """Gradient noise on a ``scale_y x scale_x`` lattice spanning the image.

    Zero at every lattice node, bounded by [-1, 1].
    """
    for s in (scale_y, scale_x):
        if not _is_pow2(int(s)) or s > min(H, W):
            raise ValueError(f"Perlin scale must be a power of two <= {min(H, W)}, got {s}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    angles = rng.uniform(0.0, 2.0 * np.pi, size=(scale_y + 1, scale_x + 1))
    grads = np.stack([np.cos(angles), np.sin(angles)], axis=-1)

    ys = np.arange(H) * scale_y / H
    xs = np.arange(W) * scale_x / W
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]

    def corner(dy: int, dx: int) -> np.ndarray:
        g = grads[(y0 + dy)[:, None], (x0 + dx)[None, :]]
        return g[..., 0] * (fy - dy) + g[..., 1] * (fx - dx)

    u, v = _fade(fy), _fade(fx)
    top = corner(0, 0) * (1 - v) + corner(0, 1) * v
    bottom = corner(1, 0) * (1 - v) + corner(1, 1) * v
    out = np.sqrt(2.0) * (top * (1 - u) + bottom * u)
    return np.clip(out, -1.0, 1.0)


def make_mask(noise: np.ndarray, threshold: float = 0.5,
              regenerate: Callable[[int], np.ndarray] | None = None, max_tries: int = 10) -> np.ndarray:
    """Binary mask where the min-max normalised ``|noise|`` reaches ``threshold``.

    An empty mask triggers ``regenerate(attempt)`` for fresh noise, up to
    ``max_tries`` consecutive attempts in total.
    """
    for attempt in range(max_tries):
        mag = np.abs(noise)
        lo, hi = mag.min(), mag.max()
        norm = (mag - lo) / (hi - lo) if hi > lo else np.zeros_like(mag)
        mask = (norm >= threshold).astype(np.float32)
        if mask.any():
            return mask
        if regenerate is None:
            break
        noise = regenerate(attempt + 1)
    raise EmptyMaskError(f"no anomalous pixel after {attempt + 1} attempt(s)")


def fit_texture(texture: np.ndarray, H: int, W: int) -> np.ndarray:
    """Tile and crop a ``[3, h, w]`` texture to ``[3, H, W]``."""
    _, h, w = texture.shape
    reps = (1, -(-H // h), -(-W // w))
    return np.tile(texture, reps)[:, :H, :W]


def blend(x_n: np.ndarray, texture: np.ndarray, mask: np.ndarray, beta: float) -> np.ndarray:
    """Replace the masked region by ``(1 - beta) * x_n + beta * texture``."""
    tex = fit_texture(np.asarray(texture), x_n.shape[1], x_n.shape[2])
    m = np.asarray(mask, dtype=x_n.dtype)[None]
    x_a = (1 - m) * x_n + m * ((1 - beta) * x_n + beta * tex)
    return np.clip(x_a, 0.0, 1.0).astype(x_n.dtype)


def procedural_texture(H: int, W: int, rng: np.random.Generator) -> np.ndarray:
    """Random coloured Perlin field in [0, 1], ``[3, H, W]``."""
    out = np.empty((3, H, W), dtype=np.float32)
    max_exp = int(np.log2(min(H, W)))
    for c in range(3):
        sy = 2 ** int(rng.integers(1, min(5, max_exp) + 1))
        sx = 2 ** int(rng.integers(1, min(5, max_exp) + 1))
        field = perlin_noise(H, W, sy, sx, rng)
        lo = rng.uniform(0.0, 0.5)
        out[c] = lo + (rng.uniform(0.5, 1.0) - lo) * (field + 1) / 2
    return out


def load_rgb(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


class TexturePool:
    """Texture sources for blending: images from a directory, or procedural
    colour fields when no directory is given."""

    def __init__(self, root: str | Path | None = None):
        self.textures: list[np.ndarray] = []
        if root is not None:
            for path in sorted(Path(root).rglob("*")):
                if path.suffix.lower() not in IMAGE_SUFFIXES:
                    continue
                try:
                    self.textures.append(load_rgb(path))
                except (OSError, UnidentifiedImageError) as exc:
                    logger.warning("skipping unreadable texture %s: %s", path, exc)
            if not self.textures:
                logger.warning("no readable textures under %s; using procedural textures", root)

    @property
    def procedural(self) -> bool:
        return not self.textures

    def sample(self, H: int, W: int, rng: np.random.Generator) -> np.ndarray:
        if self.procedural:
            return procedural_texture(H, W, rng)
        tex = self.textures[int(rng.integers(len(self.textures)))]
        if tex.shape[1:] != (H, W):
            tex = np.asarray(Image.fromarray((tex.transpose(1, 2, 0) * 255).astype(np.uint8))
                             .resize((W, H), Image.BILINEAR), dtype=np.float32).transpose(2, 0, 1) / 255.0
        return tex


@dataclass
class SynthConfig:
    scale_exp_min: int = 1
    scale_exp_max: int = 3
    threshold: float = 0.5
    beta_min: float = 0.15
    beta_max: float = 1.0


def sample_mask(H: int, W: int, rng: np.random.Generator, cfg: SynthConfig = SynthConfig()) -> np.ndarray:
    max_exp = int(np.log2(min(H, W)))
    lo, hi = min(cfg.scale_exp_min, max_exp), min(cfg.scale_exp_max, max_exp)

    def noise(_attempt: int = 0) -> np.ndarray:
        sy = 2 ** int(rng.integers(lo, hi + 1))
        sx = 2 ** int(rng.integers(lo, hi + 1))
        return perlin_noise(H, W, sy, sx, rng)

    return make_mask(noise(), cfg.threshold, regenerate=noise)


def augment(x_n: np.ndarray, texture_pool: TexturePool | None, seed, label: int = 0,
            cfg: SynthConfig = SynthConfig()) -> AnomalySample:
    """Perlin mask, random texture and random opacity applied to ``x_n``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pool = texture_pool or TexturePool()
    _, H, W = x_n.shape
    mask = sample_mask(H, W, rng, cfg)
    texture = pool.sample(H, W, rng)
    beta = float(rng.uniform(cfg.beta_min, cfg.beta_max))
    return AnomalySample(x_n=x_n, x_a=blend(x_n, texture, mask, beta), mask=mask, label=label)


def augment_batch(images: Sequence[np.ndarray], pool: TexturePool | None, seeds: Sequence,
                  labels: Sequence[int] | None = None, cfg: SynthConfig = SynthConfig()) -> list[AnomalySample]:
    labels = labels if labels is not None else [0] * len(images)
    return [augment(x, pool, s, int(y), cfg) for x, s, y in zip(images, seeds, labels)]
