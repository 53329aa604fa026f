"""The full network: frozen teacher, memory, neck and the restoration and
identity decoders, with the training objective and inference scoring."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import losses as L
from .memory import MemoryBank, class_predict, classification_loss, retrieve
from .scoring import AnomalyMap, accumulate, fuse, stage_maps
from .tensor import Tensor, concat, getitem, no_grad, stop_gradient
from .weights import load_teacher_weights
from .vit import Decoder, FeaturePyramid, Module, ModelConfig, Neck, TeacherEncoder


@dataclass
class TrainOutputs:
    report: L.LossReport
    rid_maps: list[Tensor]
    w_normal: Tensor
    w_anomalous: Tensor


@dataclass
class InferOutputs:
    teacher: list[np.ndarray]
    restored: list[np.ndarray]
    identity: list[np.ndarray]
    rid_maps: list[np.ndarray]
    trd_maps: list[np.ndarray]
    S_RI: np.ndarray
    S_TR: np.ndarray
    w_hat: np.ndarray


class MDDNet(Module):
    def __init__(self, cfg: ModelConfig, num_slots: int, shrink_threshold: float | None = None,
                 shrink_eps: float = 1e-12, decoder_seeds: tuple[int, int] | None = None):
        self.cfg = cfg
        dt = cfg.np_dtype
        self.teacher = TeacherEncoder(cfg)
        if cfg.teacher_weights:
            load_teacher_weights(self.teacher, cfg.teacher_weights)
        self.neck = Neck(cfg.embed_dim, dt)
        self.memory = MemoryBank(num_slots, cfg.embed_dim, cfg.num_classes, seed=cfg.seed + 1,
                                 shrink_threshold=shrink_threshold, eps=shrink_eps, dtype=dt)
        r_seed, i_seed = decoder_seeds or (cfg.seed + 2, cfg.seed + 3)
        self.restoration = Decoder(cfg, r_seed)
        self.identity = Decoder(cfg, i_seed)

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("teacher.")]

    def encode(self, images) -> FeaturePyramid:
        with no_grad():
            return self.teacher(Tensor(np.asarray(images, dtype=self.cfg.np_dtype)))

    def _identity_input(self, tokens: Tensor) -> Tensor:
        return self.neck(tokens) if self.cfg.identity_neck else tokens

    def training_step(self, x_n: np.ndarray, x_a: np.ndarray, mask: np.ndarray,
                      labels: Sequence[int], mining_fraction: float = 1.0) -> TrainOutputs:
        """Forward pass of one batch and all five losses.

        ``x_n``/``x_a`` are normalised ``[bs, 3, H, W]`` images, ``mask`` is
        ``[bs, H, W]``. Memory retrieval for the anomalous images is cut from
        the graph so only the normal flow updates the memory.
        """
        bs = len(x_n)
        both = self.encode(np.concatenate([x_n, x_a], axis=0))
        t_n = [Tensor(f.data[:bs]) for f in both.spatial]
        t_a = [Tensor(f.data[bs:]) for f in both.spatial]
        tok_n, tok_a = Tensor(both.tokens.data[:bs]), Tensor(both.tokens.data[bs:])

        f_a, w_a = retrieve(tok_a, self.memory)
        f_a = stop_gradient(f_a)
        f_n, w_n = retrieve(tok_n, self.memory)

        restored = self.restoration(concat([self.neck(f_a), self.neck(f_n)], axis=0))
        r_a = [getitem(r, slice(0, bs)) for r in restored]
        r_n = [getitem(r, slice(bs, 2 * bs)) for r in restored]
        i_a = self.identity(self._identity_input(tok_a))

        rid = [L.rid_map(r, i) for r, i in zip(r_a, i_a)]
        report = L.total_loss(
            restoration=L.restoration_loss(r_a, t_n, mining_fraction),
            identity=L.identity_loss(i_a, t_a, mining_fraction),
            dist=L.discrepancy_loss(rid, mask),
            rec=L.reconstruction_loss(r_n, t_n, mining_fraction),
            cls=classification_loss(class_predict(w_n, self.memory), labels),
        )
        return TrainOutputs(report, rid, w_n, w_a)

    def infer(self, images: np.ndarray) -> InferOutputs:
        """Decoder pyramids, per-stage maps and accumulated maps for a batch."""
        with no_grad():
            t = self.encode(images)
            f, w_hat = retrieve(t.tokens, self.memory)
            restored = self.restoration(self.neck(f))
            identity = self.identity(self._identity_input(t.tokens))
        teacher = [x.data for x in t.spatial]
        restored = [x.data for x in restored]
        identity = [x.data for x in identity]
        rid, trd = stage_maps(teacher, restored, identity)
        size = self.cfg.image_size
        return InferOutputs(teacher, restored, identity, rid, trd,
                            accumulate(rid, size), accumulate(trd, size), w_hat.data)

    def score(self, images: np.ndarray, alpha: float, smoothing_sigma: float = 0.0) -> AnomalyMap:
        out = self.infer(images)
        return fuse(out.S_RI, out.S_TR, alpha, smoothing_sigma)
