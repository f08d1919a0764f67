"""Rotation-prediction branch: rotated-sample generation, condensing subnetwork
output, cosine-classifier probabilities and the cross-entropy objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .autodiff import functional as F
from .autodiff.tensor import Tensor, as_tensor, no_grad
from .losses import cosine_logits, cross_entropy
from .nn import CosineClassifier, Module

ROTATION_CLASSES = 4  # 0, 90, 180, 270 degrees counter-clockwise


@dataclass
class RotationSample:
    image: Tensor
    rotation_class: int

    def __post_init__(self):
        if self.rotation_class not in (0, 1, 2, 3):
            raise ValueError(f"rotation class must be in 0..3, got {self.rotation_class}")


def _as_images(images) -> List[Tensor]:
    if isinstance(images, np.ndarray):
        return [Tensor(img) for img in images]
    if isinstance(images, Tensor):
        return [Tensor(img) for img in images.data]
    return [as_tensor(img) for img in images]


def make_rotation_batch(images, rng_seed, all_four: bool = False) -> List[RotationSample]:
    """Rotate each square image by a uniformly drawn quarter-turn count.

    ``rng_seed`` is an int or a ``numpy.random.Generator``. With ``all_four``
    every image yields four samples, one per rotation class.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    out = []
    for img in _as_images(images):
        if img.shape[-1] != img.shape[-2]:
            raise ValueError(f"rotation samples need square images, got {img.shape}")
        classes = range(ROTATION_CLASSES) if all_four else [int(rng.integers(0, ROTATION_CLASSES))]
        for r in classes:
            out.append(RotationSample(F.rotate90(img.detach(), r), r))
    return out


def stack_samples(samples: Sequence[RotationSample]) -> Tuple[Tensor, np.ndarray]:
    if not samples:
        raise ValueError("empty rotation batch")
    images = Tensor(np.stack([s.image.data for s in samples]))
    return images, np.array([s.rotation_class for s in samples], dtype=np.int64)


def slb_embedding(images: Tensor, encoder: Module, f_se: Module) -> Tensor:
    """GAP of the condensing net applied to the shared encoder output."""
    return F.global_avg_pool(f_se(encoder(images)))


def slb_forward(sample, encoder: Module, f_se: Module, head: CosineClassifier) -> Tensor:
    """Rotation-class probabilities for one sample (or a stacked [n, c, h, w] batch)."""
    if isinstance(sample, RotationSample):
        probs = cosine_logits(slb_embedding(sample.image.reshape((1,) + sample.image.shape),
                                            encoder, f_se), head)
        return probs.reshape(-1)
    return cosine_logits(slb_embedding(as_tensor(sample), encoder, f_se), head)


def slb_loss(samples: Sequence[RotationSample], encoder: Module, f_se: Module,
             head: CosineClassifier) -> Tensor:
    """Mean cross-entropy of the rotation classifier over the batch."""
    images, labels = stack_samples(samples)
    return cross_entropy(slb_forward(images, encoder, f_se, head), labels)


def rotation_accuracy(samples: Sequence[RotationSample], encoder: Module, f_se: Module,
                      head: CosineClassifier, chunk: int = 128) -> float:
    """Fraction of samples whose rotation class is predicted, in eval mode."""
    images, labels = stack_samples(samples)
    modules = (encoder, f_se, head)
    modes = [m.training for m in modules]
    for m in modules:
        m.eval()
    hits = 0
    try:
        with no_grad():
            for s in range(0, len(labels), chunk):
                probs = slb_forward(Tensor(images.data[s:s + chunk]), encoder, f_se, head)
                hits += int((probs.data.argmax(1) == labels[s:s + chunk]).sum())
    finally:
        for m, mode in zip(modules, modes):
            m.train(mode)
    return hits / len(labels)
