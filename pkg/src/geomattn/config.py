"""Run configuration as a flat ``key = value`` text file."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from typing import Tuple

from .losses import LossWeights

PRESETS = {
    # name: (use_gfb, use_iam, slb enabled)
    "gb": (False, False, False),
    "gb+r18": (True, False, False),
    "gb+gfb": (True, True, False),
    "full": (True, True, True),
}


@dataclass
class RunConfig:
    data_dir: str = "data"
    seed: int = 0
    preset: str = "full"
    K: int = 3
    widths: Tuple[int, ...] = (16, 32, 64)
    lam_tri_gb: float = 0.5
    lam_sce_gb: float = 0.5
    lam_tri_gfb: float = 0.5
    lam_sce_gfb: float = 0.5
    lam_slb: float = 1.0
    margin: float = 0.5
    smoothing_eps: float = 0.1
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 5e-4
    epochs: int = 80
    lr_decay_epochs: Tuple[int, ...] = (20, 40, 60)
    lr_decay_factor: float = 0.1
    max_steps: int = 0
    P: int = 7
    K_img: int = 4
    augment: bool = True
    all_four_rotations: bool = False
    gamma_init: float = 10.0
    attn_shift: float = 0.0

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if self.K < 1 or self.K % 2 == 0:
            raise ValueError(f"K must be a positive odd integer, got {self.K}")
        if len(self.widths) != 3:
            raise ValueError(f"widths needs 3 entries, got {self.widths}")
        self.loss_weights()

    @property
    def use_gfb(self) -> bool:
        return PRESETS[self.preset][0]

    @property
    def use_iam(self) -> bool:
        return PRESETS[self.preset][1]

    def loss_weights(self) -> LossWeights:
        use_gfb, _, slb = PRESETS[self.preset]
        return LossWeights(
            tri_gb=self.lam_tri_gb, sce_gb=self.lam_sce_gb,
            tri_gfb=self.lam_tri_gfb if use_gfb else 0.0,
            sce_gfb=self.lam_sce_gfb if use_gfb else 0.0,
            slb=self.lam_slb if slb else 0.0,
            margin=self.margin, smoothing_eps=self.smoothing_eps)

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return self.lr * self.lr_decay_factor ** drops

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # -- text form ----------------------------------------------------------
    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        types = {f.name: f for f in fields(cls)}
        values = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {n}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in types:
                raise ValueError(f"line {n}: unknown key {key!r}")
            values[key] = _parse(value, types[key].default)
        return cls(**values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.loads(fh.read())

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, default):
    if isinstance(default, bool):
        if text.lower() not in ("true", "false"):
            raise ValueError(f"expected true/false, got {text!r}")
        return text.lower() == "true"
    if isinstance(default, tuple):
        return tuple(int(v) for v in text.split(",") if v.strip())
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text
