"""Run configuration, built-in profiles and JSON config files."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .scoring import DATASET_ALPHA
from .synth import SynthConfig
from .vit import ModelConfig


@dataclass
class MemoryConfig:
    N: int = 64
    lambda_policy: str | float = "1/N"
    eps: float = 1e-12

    @property
    def shrink_threshold(self) -> float:
        """Threshold from the policy: ``"k/N"`` strings or a literal value."""
        p = self.lambda_policy
        if isinstance(p, str):
            num, _, den = p.partition("/")
            if den.strip() != "N":
                raise ValueError(f"unsupported lambda policy {p!r}")
            return float(num) / self.N
        return float(p)


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-4
    weight_decay: float = 1e-4
    lr_drop_epoch: int = 80
    lr_drop_factor: float = 0.1
    batch_size: int = 8
    mining_fraction: float = 0.5


@dataclass
class ScoreConfig:
    alpha: float = 0.4
    smoothing_sigma: float = 0.0
    iou_mode: str = "pooled"


@dataclass
class DataConfig:
    root: str | None = None
    texture_pool: str | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    score: ScoreConfig = field(default_factory=ScoreConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = copy.deepcopy(d)
        data = d.get("data", {})
        if "synth" in data:
            data["synth"] = SynthConfig(**data["synth"])
        return cls(
            model=ModelConfig(**d.get("model", {})),
            memory=MemoryConfig(**d.get("memory", {})),
            train=TrainConfig(**d.get("train", {})),
            score=ScoreConfig(**d.get("score", {})),
            data=DataConfig(**data),
            seed=d.get("seed", 0),
        )

    def architecture_hash(self) -> str:
        """Digest of everything that fixes the network's parameters' meaning."""
        key = {"model": asdict(self.model), "memory": asdict(self.memory)}
        return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _benchmark(num_classes: int, N: int, batch: int, alpha: float) -> dict:
    return {
        "model": {"image_size": 256, "patch_size": 16, "embed_dim": 384, "num_heads": 6,
                  "num_classes": num_classes},
        "memory": {"N": N},
        "train": {"epochs": 100, "lr": 1e-4, "weight_decay": 1e-4, "lr_drop_epoch": 80,
                  "lr_drop_factor": 0.1, "batch_size": batch},
        "score": {"alpha": alpha},
        "data": {"synth": {"scale_exp_min": 0, "scale_exp_max": 5}},
    }


PROFILES: dict[str, dict] = {
    "toy": {
        "model": {"image_size": 64, "patch_size": 8, "embed_dim": 64, "num_heads": 4,
                  "num_classes": 2},
        "memory": {"N": 64},
        "train": {"epochs": 30, "lr": 1e-3, "weight_decay": 1e-4, "lr_drop_epoch": 24,
                  "lr_drop_factor": 0.1, "batch_size": 8, "mining_fraction": 0.5},
        "score": {"alpha": 0.5},
    },
    "mvtec": _benchmark(15, 500, 8, DATASET_ALPHA["mvtec"]),
    "visa": _benchmark(12, 1000, 4, DATASET_ALPHA["visa"]),
    "real_iad": _benchmark(30, 2000, 4, DATASET_ALPHA["real_iad"]),
    "uni_medical": _benchmark(3, 1000, 4, DATASET_ALPHA["uni_medical"]),
}


def profile(name: str, **overrides) -> RunConfig:
    if name not in PROFILES:
        raise KeyError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return RunConfig.from_dict(_merge(PROFILES[name], overrides))


def load_config(path: str | Path) -> RunConfig:
    """JSON config; an optional ``"profile"`` key supplies defaults that the
    rest of the file overrides."""
    d = json.loads(Path(path).read_text())
    base = PROFILES[d.pop("profile")] if "profile" in d else {}
    known = {f.name for f in fields(RunConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    return RunConfig.from_dict(_merge(base, d))
