"""Patch-embedding transformer: frozen teacher encoder, linear neck and the
two structurally identical decoders."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, as_tensor, matmul, parameter, reshape, transpose


@dataclass
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    num_heads: int = 4
    teacher_blocks: int = 12
    teacher_stages: int = 4
    decoder_blocks: int = 9
    mlp_ratio: float = 4.0
    num_classes: int = 2
    seed: int = 0
    # Feed the identity decoder through the neck as well (inference listing variant).
    identity_neck: bool = False
    dtype: str = "float32"
    # Optional weight directory overriding the seeded teacher.
    teacher_weights: str | None = None

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.teacher_blocks % self.teacher_stages:
            raise ValueError("teacher_blocks must be divisible by teacher_stages")
        if self.decoder_blocks % 3:
            raise ValueError("decoder_blocks must be divisible by 3")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal samples redrawn until they fall within two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


class Module:
    """Parameter container; parameters are leaf tensors held as attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = parameter(trunc_normal(rng, (d_in, d_out), dtype=dtype))
        self.bias = parameter(np.zeros(d_out, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32):
        self.weight = parameter(np.ones(dim, dtype=dtype))
        self.bias = parameter(np.zeros(dim, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias, axis=-1)


class Attention(Module):
    def __init__(self, dim: int, num_heads: int, rng, dtype=np.float32):
        self.num_heads = num_heads
        self.q = Linear(dim, dim, rng, dtype)
        self.k = Linear(dim, dim, rng, dtype)
        self.v = Linear(dim, dim, rng, dtype)
        self.proj = Linear(dim, dim, rng, dtype)

    def _heads(self, x: Tensor) -> Tensor:
        b, t, c = x.shape
        return transpose(reshape(x, (b, t, self.num_heads, c // self.num_heads)), (0, 2, 1, 3))

    def forward(self, x: Tensor) -> Tensor:
        b, t, c = x.shape
        q, k, v = self._heads(self.q(x)), self._heads(self.k(x)), self._heads(self.v(x))
        scale = (c // self.num_heads) ** -0.5
        att = F.softmax(matmul(q, transpose(k, (0, 1, 3, 2))) * scale, axis=-1)
        out = reshape(transpose(matmul(att, v), (0, 2, 1, 3)), (b, t, c))
        return self.proj(out)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng, dtype=np.float32):
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float, rng, dtype=np.float32):
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = Attention(dim, num_heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def tokens_to_spatial(tokens: Tensor) -> Tensor:
    """[bs, T, c] -> [bs, c, h, w] with row-major token order."""
    b, t, c = tokens.shape
    side = int(round(np.sqrt(t)))
    if side * side != t:
        raise ValueError(f"token count {t} is not a square")
    return reshape(transpose(tokens, (0, 2, 1)), (b, c, side, side))


def spatial_to_tokens(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return transpose(reshape(x, (b, c, h * w)), (0, 2, 1))


class PatchEmbed(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        self.image_size = cfg.image_size
        self.patch = cfg.patch_size
        self.proj = Linear(3 * cfg.patch_size ** 2, cfg.embed_dim, rng, dtype)
        self.pos = parameter(trunc_normal(rng, (1, cfg.num_tokens, cfg.embed_dim), dtype=dtype))

    def patchify(self, image: Tensor) -> Tensor:
        b, ch, H, W = image.shape
        if H != self.image_size or W != self.image_size:
            raise ValueError(f"expected {self.image_size}x{self.image_size} images, got {H}x{W}")
        p, g = self.patch, H // self.patch
        x = reshape(image, (b, ch, g, p, g, p))
        x = transpose(x, (0, 2, 4, 1, 3, 5))
        return reshape(x, (b, g * g, ch * p * p))

    def forward(self, image: Tensor) -> Tensor:
        return self.proj(self.patchify(as_tensor(image))) + self.pos


@dataclass
class FeaturePyramid:
    spatial: list[Tensor]
    tokens: Tensor


class TeacherEncoder(Module):
    """Patch embedding followed by ``teacher_blocks`` blocks grouped into
    stages; outputs are taken at every stage boundary."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(cfg.seed)
        dt = cfg.np_dtype
        self.cfg = cfg
        self.embed = PatchEmbed(cfg, rng, dt)
        self.blocks = [Block(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio, rng, dt)
                       for _ in range(cfg.teacher_blocks)]
        self.requires_grad_(False)

    @property
    def stage_ends(self) -> list[int]:
        per = self.cfg.teacher_blocks // self.cfg.teacher_stages
        return [per * (i + 1) for i in range(self.cfg.teacher_stages)]

    def forward(self, image) -> FeaturePyramid:
        x = self.embed(image)
        outs = []
        ends = set(self.stage_ends)
        for i, blk in enumerate(self.blocks, start=1):
            x = blk(x)
            if i in ends:
                outs.append(x)
        return FeaturePyramid([tokens_to_spatial(t) for t in outs[:-1]], outs[-1])


class Neck(Module):
    """Single per-token linear map c -> c, identity-initialised."""

    def __init__(self, dim: int, dtype=np.float32):
        self.weight = parameter(np.eye(dim, dtype=dtype))
        self.bias = parameter(np.zeros(dim, dtype=dtype))

    def forward(self, tokens: Tensor) -> Tensor:
        return matmul(tokens, self.weight) + self.bias


class Decoder(Module):
    """Three stages of transformer blocks; returns the spatial output of
    each stage, stage ``i`` being compared with teacher stage ``i``."""

    def __init__(self, cfg: ModelConfig, seed: int):
        rng = np.random.default_rng(seed)
        dt = cfg.np_dtype
        self.per_stage = cfg.decoder_blocks // 3
        self.blocks = [Block(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio, rng, dt)
                       for _ in range(cfg.decoder_blocks)]

    def forward(self, tokens: Tensor) -> list[Tensor]:
        x = tokens
        outs = []
        for i, blk in enumerate(self.blocks, start=1):
            x = blk(x)
            if i % self.per_stage == 0:
                outs.append(tokens_to_spatial(x))
        return outs
