"""Train-time augmentation: pad-and-crop, horizontal flip, random erasing."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


@dataclass
class AugmentConfig:
    pad: int = 4
    p_crop: float = 1.0
    p_flip: float = 0.5
    p_erase: float = 0.5
    erase_area: tuple = (0.02, 0.2)
    erase_aspect: tuple = (0.3, 3.3)

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(p_crop=0.0, p_flip=0.0, p_erase=0.0)


def erase_box(h: int, w: int, rng: np.random.Generator, area=(0.02, 0.2),
              aspect=(0.3, 3.3), attempts: int = 100) -> Optional[tuple]:
    """Pick an in-bounds rectangle ``(top, left, height, width)`` or None."""
    for _ in range(attempts):
        target = rng.uniform(*area) * h * w
        ratio = math.exp(rng.uniform(math.log(aspect[0]), math.log(aspect[1])))
        eh = int(round(math.sqrt(target * ratio)))
        ew = int(round(math.sqrt(target / ratio)))
        if 0 < eh < h and 0 < ew < w:
            top = int(rng.integers(0, h - eh + 1))
            left = int(rng.integers(0, w - ew + 1))
            return top, left, eh, ew
    return None


def augment(image: np.ndarray, rng: np.random.Generator, fill: Sequence[float],
            cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Augment one [c, h, w] image; the output has the input's shape."""
    c, h, w = image.shape
    out = image
    if cfg.pad and rng.uniform() < cfg.p_crop:
        padded = np.pad(out, ((0, 0), (cfg.pad, cfg.pad), (cfg.pad, cfg.pad)))
        top = int(rng.integers(0, 2 * cfg.pad + 1))
        left = int(rng.integers(0, 2 * cfg.pad + 1))
        out = padded[:, top:top + h, left:left + w]
    if rng.uniform() < cfg.p_flip:
        out = out[:, :, ::-1]
    out = np.array(out)
    if rng.uniform() < cfg.p_erase:
        box = erase_box(h, w, rng, cfg.erase_area, cfg.erase_aspect)
        if box is not None:
            top, left, eh, ew = box
            out[:, top:top + eh, left:left + ew] = np.asarray(fill, dtype=np.float64)[:, None, None]
    return out


def augment_batch(images: np.ndarray, rng: np.random.Generator, fill: Sequence[float],
                  cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    return np.stack([augment(img, rng, fill, cfg) for img in images])
