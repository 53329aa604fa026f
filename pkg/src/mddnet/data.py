"""MVTec-style dataset indexing and loading, and a procedural toy dataset."""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .synth import IMAGE_SUFFIXES, SynthConfig, TexturePool, augment, perlin_noise

logger = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class TrainItem:
    path: Path
    category: str


@dataclass
class TestItem:
    path: Path
    category: str
    is_anomalous: bool
    mask_path: Path | None = None


@dataclass
class DatasetIndex:
    categories: list[str]
    train: list[TrainItem]
    test: list[TestItem]

    def label(self, category: str) -> int:
        return self.categories.index(category)


def _images(folder: Path) -> list[Path]:
    if not folder.is_dir():
        return []
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def scan_dataset(root: str | Path, categories: Sequence[str] | None = None) -> DatasetIndex:
    """Index ``<cat>/train/good``, ``<cat>/test/<defect>`` and
    ``<cat>/ground_truth/<defect>/<stem>_mask.png``.

    Anomalous test images without a mask are dropped with a warning.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    cats = sorted(categories) if categories else sorted(
        d.name for d in root.iterdir() if d.is_dir() and (d / "train").is_dir())
    train: list[TrainItem] = []
    test: list[TestItem] = []
    for cat in cats:
        train.extend(TrainItem(p, cat) for p in _images(root / cat / "train" / "good"))
        test_root = root / cat / "test"
        defects = sorted(d.name for d in test_root.iterdir() if d.is_dir()) if test_root.is_dir() else []
        for defect in defects:
            for p in _images(test_root / defect):
                if defect == "good":
                    test.append(TestItem(p, cat, False))
                    continue
                mask = root / cat / "ground_truth" / defect / f"{p.stem}_mask.png"
                if not mask.exists():
                    logger.warning("no mask for anomalous image %s; entry skipped", p)
                    continue
                test.append(TestItem(p, cat, True, mask))
    if not train:
        raise ValueError(f"no training images found under {root}")
    return DatasetIndex(cats, train, test)


def normalize_image(x: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    m = np.asarray(mean, dtype=x.dtype).reshape(-1, 1, 1)
    s = np.asarray(std, dtype=x.dtype).reshape(-1, 1, 1)
    return (x - m) / s


def load_image(path: str | Path, size: int, normalize: bool = True,
               mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    """RGB image as ``[3, size, size]`` float32, bilinearly resized."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except OSError as exc:
        raise OSError(f"cannot decode image {path}: {exc}") from exc
    x = arr.transpose(2, 0, 1).copy()
    return normalize_image(x, mean, std) if normalize else x


def load_mask(path: str | Path, size: int) -> np.ndarray:
    """Binary ``[size, size]`` mask; grey levels above 127 are anomalous."""
    with Image.open(path) as im:
        im = im.convert("L")
        if im.size != (size, size):
            im = im.resize((size, size), Image.NEAREST)
        return (np.asarray(im) > 127).astype(np.float32)


def save_image(x: np.ndarray, path: str | Path) -> None:
    arr = np.clip(np.round(np.asarray(x).transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def save_mask(mask: np.ndarray, path: str | Path) -> None:
    Image.fromarray((np.asarray(mask) > 0.5).astype(np.uint8) * 255).save(path)


def batch_iterator(items: Sequence, batch_size: int, shuffle_seed: int | None = None) -> Iterator[list]:
    """Batches of ``items`` in a seeded random order; the last batch may be short."""
    order = np.arange(len(items))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(items))
    for start in range(0, len(items), batch_size):
        yield [items[i] for i in order[start:start + batch_size]]


# -- toy dataset -----------------------------------------------------------

@dataclass
class ToySpec:
    categories: list[str] = field(default_factory=lambda: ["blobs", "stripes"])
    train_per_category: int = 50
    test_good_per_category: int = 10
    test_anomalous_per_category: int = 10
    image_size: int = 64
    seed: int = 0
    # Opacity floor for held-out test defects; training synthesis keeps its own range.
    anomaly_beta_min: float = 0.5

    @classmethod
    def from_file(cls, path: str | Path) -> "ToySpec":
        return cls(**json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


def _stripes(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    theta = rng.uniform(0.2, 0.5) * np.pi
    freq = rng.uniform(5.0, 7.0)
    phase = rng.uniform(0, 2 * np.pi)
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    base = np.array([0.25, 0.35, 0.6]) + rng.uniform(-0.03, 0.03, 3)
    hi = np.array([0.85, 0.8, 0.4]) + rng.uniform(-0.03, 0.03, 3)
    img = base[:, None, None] + (hi - base)[:, None, None] * wave[None]
    img += rng.normal(0, 0.02, img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


def _blobs(size: int, rng: np.random.Generator) -> np.ndarray:
    field_ = perlin_noise(size, size, 4, 4, rng)
    t = (field_ + 1) / 2
    a = np.array([0.55, 0.4, 0.25]) + rng.uniform(-0.03, 0.03, 3)
    b = np.array([0.75, 0.65, 0.45]) + rng.uniform(-0.03, 0.03, 3)
    img = a[:, None, None] + (b - a)[:, None, None] * t[None]
    img += rng.normal(0, 0.02, img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


TEXTURE_FAMILIES = {"blobs": _blobs, "stripes": _stripes}


def toy_image(category: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """A normal sample of one procedural texture family."""
    names = sorted(TEXTURE_FAMILIES)
    family = TEXTURE_FAMILIES.get(category) or TEXTURE_FAMILIES[names[zlib.crc32(category.encode()) % len(names)]]
    return family(size, rng)


def toy_dataset(spec: ToySpec, root: str | Path) -> DatasetIndex:
    """Write an MVTec-style tree of procedural images and return its index.

    Test anomalies are synthetic blends with their masks saved under
    ``ground_truth``; they use a seed stream disjoint from training. The clean
    source of every anomalous image is kept under ``_sources`` for auditing.
    """
    root = Path(root)
    pool = TexturePool()
    test_synth = SynthConfig(beta_min=spec.anomaly_beta_min)
    for ci, cat in enumerate(sorted(spec.categories)):
        rng = np.random.default_rng([spec.seed, ci])
        d_train = root / cat / "train" / "good"
        d_good = root / cat / "test" / "good"
        d_bad = root / cat / "test" / "synthetic"
        d_gt = root / cat / "ground_truth" / "synthetic"
        d_src = root / "_sources" / cat
        for d in (d_train, d_good, d_bad, d_gt, d_src):
            d.mkdir(parents=True, exist_ok=True)
        for i in range(spec.train_per_category):
            save_image(toy_image(cat, spec.image_size, rng), d_train / f"{i:03d}.png")
        for i in range(spec.test_good_per_category):
            save_image(toy_image(cat, spec.image_size, rng), d_good / f"{i:03d}.png")
        anomaly_rng = np.random.default_rng([spec.seed, ci, 7919])
        for i in range(spec.test_anomalous_per_category):
            x = toy_image(cat, spec.image_size, rng)
            x = np.round(x * 255) / 255  # quantise first so the outside-mask identity survives PNG
            sample = augment(x.astype(np.float32), pool, anomaly_rng, label=ci, cfg=test_synth)
            save_image(sample.x_a, d_bad / f"{i:03d}.png")
            save_image(x, d_src / f"{i:03d}.png")
            save_mask(sample.mask, d_gt / f"{i:03d}_mask.png")
    (root / "toy_spec.json").write_text(json.dumps(spec.to_dict(), indent=2))
    return scan_dataset(root, spec.categories)
