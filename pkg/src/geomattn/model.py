"""Three-branch network: global branch, shared attention encoder feeding the
rotation branch and the attention-weighted geometric-features branch."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .autodiff import functional as F
from .autodiff.tensor import Tensor, as_tensor, mul, no_grad, reshape
from .iam import AttentionMaps, iam_forward, uniform_attention
from .losses import BNNeck
from .nn import CosineClassifier, Linear, Module, conv_stack
from .selfsup import ROTATION_CLASSES, slb_forward

DOWNSAMPLE = 8


@dataclass
class ModelConfig:
    n_ids: int = 2
    widths: Tuple[int, int, int] = (16, 32, 64)
    K: int = 3
    in_channels: int = 3
    use_gfb: bool = True
    use_iam: bool = True
    gamma_init: float = 10.0
    attn_shift: float = 0.0
    seed: int = 0


@dataclass
class BranchOutputs:
    f_gb: Tensor
    f_gb_bn: Tensor
    logits_gb: Tensor
    f_gfb: Optional[Tensor] = None
    f_gfb_bn: Optional[Tensor] = None
    logits_gfb: Optional[Tensor] = None
    attention: Optional[Tensor] = None
    maps: Optional[AttentionMaps] = None


@dataclass
class EmbeddingPair:
    f_gb: np.ndarray
    f_gfb: Optional[np.ndarray]
    concat: np.ndarray = field(init=False)

    def __post_init__(self):
        parts = [self.f_gb] if self.f_gfb is None else [self.f_gb, self.f_gfb]
        self.concat = np.concatenate(parts, axis=-1)


class GeomAttnModel(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        c1, c2, c3 = cfg.widths
        stem = [cfg.in_channels, c1, c2, c3]
        self.gb_stage1 = conv_stack(stem, [2, 2, 2], rng)
        self.gb_stage2 = conv_stack([c3, c3, c3], [1, 1], rng)
        self.attn_encoder = conv_stack(stem, [2, 2, 2], rng)
        # a negative shift starts L sparse, so empty regions get no attention
        self.attn_encoder.layers[-1].bn.bias.data[...] = -cfg.attn_shift
        self.f_se = conv_stack([c3, c3, c3], [2, 2], rng)
        self.gfb_tail = conv_stack([c3, c3, c3], [1, 1], rng)
        self.neck_gb = BNNeck(c3)
        self.neck_gfb = BNNeck(c3)
        self.id_head_gb = Linear(c3, cfg.n_ids, rng)
        self.id_head_gfb = Linear(c3, cfg.n_ids, rng)
        self.rot_head = CosineClassifier(c3, ROTATION_CLASSES, rng, cfg.gamma_init)

    @property
    def K(self) -> int:
        return self.cfg.K

    def _check_input(self, images: Tensor) -> None:
        if images.ndim != 4:
            raise ValueError(f"expected a batch [n, c, h, w], got shape {images.shape}")
        h, w = images.shape[-2:]
        if h != w or h % DOWNSAMPLE:
            raise ValueError(f"input must be square with side divisible by {DOWNSAMPLE}, got {h}x{w}")

    def attention(self, images: Tensor) -> AttentionMaps:
        return iam_forward(self.attn_encoder(images), self.cfg.K)

    def forward_train(self, images, attention: Optional[Tensor] = None) -> BranchOutputs:
        """Run the GB and GFB branches; ``attention`` overrides the IAM map if given."""
        images = as_tensor(images)
        self._check_input(images)
        x1 = self.gb_stage1(images)
        f_gb = F.global_avg_pool(self.gb_stage2(x1))
        f_gb, f_gb_bn = self.neck_gb(f_gb)
        out = BranchOutputs(f_gb, f_gb_bn, self.id_head_gb(f_gb_bn))
        if not self.cfg.use_gfb:
            return out
        maps = None
        if attention is None:
            if self.cfg.use_iam:
                maps = self.attention(images)
                attention = maps.Q
            else:
                attention = uniform_attention(x1.shape[:1], *x1.shape[-2:])
        q = as_tensor(attention)
        if q.shape[-2:] != x1.shape[-2:]:
            raise ValueError(f"attention map {q.shape} does not match stage-1 features {x1.shape}")
        weighted = mul(x1, reshape(q, (q.shape[0], 1) + q.shape[-2:]))
        f_gfb = F.global_avg_pool(self.gfb_tail(weighted))
        f_gfb, f_gfb_bn = self.neck_gfb(f_gfb)
        out.f_gfb, out.f_gfb_bn = f_gfb, f_gfb_bn
        out.logits_gfb = self.id_head_gfb(f_gfb_bn)
        out.attention, out.maps = q, maps
        return out

    def rotation_probs(self, images) -> Tensor:
        return slb_forward(as_tensor(images), self.attn_encoder, self.f_se, self.rot_head)

    def forward_infer(self, images, chunk: int = 64) -> EmbeddingPair:
        """Embeddings in eval mode: post-neck GB and GFB features and their concatenation."""
        images = np.asarray(images.data if isinstance(images, Tensor) else images)
        was_training = self.training
        self.eval()
        gb, gfb = [], []
        try:
            with no_grad():
                for s in range(0, len(images), chunk):
                    out = self.forward_train(Tensor(images[s:s + chunk]))
                    gb.append(out.f_gb_bn.data)
                    if out.f_gfb_bn is not None:
                        gfb.append(out.f_gfb_bn.data)
        finally:
            self.train(was_training)
        return EmbeddingPair(np.concatenate(gb), np.concatenate(gfb) if gfb else None)

    def attention_maps(self, images, chunk: int = 64) -> np.ndarray:
        """Eval-mode IAM maps Q, [n, h/8, w/8]."""
        images = np.asarray(images.data if isinstance(images, Tensor) else images)
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                qs = [self.attention(Tensor(images[s:s + chunk])).Q.data
                      for s in range(0, len(images), chunk)]
        finally:
            self.train(was_training)
        return np.concatenate(qs)
