"""Synthetic schematic vehicles with landmark ground truth.

Each identity is a fixed set of shape parameters (body proportions, cabin,
wheel size and spacing, lamp height, paint drawn from a small shared palette). Each image draws its own
nuisance parameters (placement, scale, small rotation, lighting, background
clutter, sensor noise). Wheel and lamp centres are recorded in pixel
coordinates of the final image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from . import pnm
from .manifest import Manifest, Record

SIDE = 64
SUPERSAMPLE = 2
MIN_SEPARATION = 0.15

# name: (low, high) for each identity shape parameter
SHAPE_RANGES = {
    "length": (24.0, 32.0),
    "aspect": (0.32, 0.55),
    "cabin_len": (0.35, 0.7),
    "cabin_height": (0.4, 0.85),
    "cabin_shift": (-0.3, 0.3),
    "wheel_radius": (2.5, 5.0),
    "wheel_offset": (0.45, 0.8),
    "lamp_height": (-0.6, 0.35),
    "paint": (0.0, 1.0),
}
# identities share a few paint colours so that geometry has to tell them apart
PALETTE = ((0.75, 0.75, 0.78), (0.2, 0.3, 0.65), (0.6, 0.15, 0.15), (0.25, 0.25, 0.25))
CAMERA_GAIN = (1.0, 0.85, 1.1, 0.95, 1.05, 0.9)
LANDMARK_NAMES = ("wheel_rear", "wheel_front", "lamp_rear", "lamp_front")


@dataclass(frozen=True)
class VehicleShape:
    length: float
    aspect: float
    cabin_len: float
    cabin_height: float
    cabin_shift: float
    wheel_radius: float
    wheel_offset: float
    lamp_height: float
    paint: float

    @property
    def color(self) -> np.ndarray:
        return np.array(PALETTE[min(int(self.paint * len(PALETTE)), len(PALETTE) - 1)])

    @classmethod
    def from_unit(cls, unit: np.ndarray) -> "VehicleShape":
        vals = [lo + float(x) * (hi - lo) for x, (lo, hi) in zip(unit, SHAPE_RANGES.values())]
        return cls(*vals)


@dataclass(frozen=True)
class Nuisance:
    shift_u: float
    shift_v: float
    scale: float
    angle_deg: float
    clutter: int
    noise_sigma: float


def sample_identities(n_id: int, rng: np.random.Generator,
                      min_sep: float = MIN_SEPARATION) -> List[VehicleShape]:
    """Draw identity parameters so every pair differs by ``min_sep`` in some unit coordinate."""
    units: List[np.ndarray] = []
    while len(units) < n_id:
        cand = rng.uniform(size=len(SHAPE_RANGES))
        if all(np.max(np.abs(cand - u)) >= min_sep for u in units):
            units.append(cand)
    return [VehicleShape.from_unit(u) for u in units]


def sample_nuisance(rng: np.random.Generator) -> Nuisance:
    return Nuisance(shift_u=rng.uniform(-6, 6), shift_v=rng.uniform(-6, 6),
                    scale=rng.uniform(0.8, 1.2), angle_deg=rng.uniform(-10, 10),
                    clutter=int(rng.integers(2, 7)), noise_sigma=rng.uniform(0.01, 0.04))


def _canonical_landmarks(shape: VehicleShape) -> List[Tuple[float, float]]:
    """(x, y) in the vehicle frame: x toward the front, y downward."""
    half_l = shape.length / 2
    half_h = shape.length * shape.aspect / 2
    wx = shape.wheel_offset * half_l
    lx = half_l - 1.5
    ly = shape.lamp_height * half_h
    return [(-wx, half_h), (wx, half_h), (-lx, ly), (lx, ly)]


def _paint_clutter(img: np.ndarray, yy: np.ndarray, xx: np.ndarray, count: int,
                   rng: np.random.Generator) -> None:
    # squares and discs only: clutter must carry no orientation cue
    for _ in range(count):
        color = rng.uniform(0.05, 0.95, size=3)
        cy, cx = rng.uniform(0, SIDE, size=2)
        size = rng.uniform(2, 6)
        if rng.uniform() < 0.5:
            mask = (np.abs(yy - cy) <= size) & (np.abs(xx - cx) <= size)
        else:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= size ** 2
        img[:, mask] = color[:, None]


def render(shape: VehicleShape, nuis: Nuisance, camera: int,
           rng: np.random.Generator) -> Tuple[np.ndarray, Tuple]:
    """Render one RGB image [3, SIDE, SIDE] in [0, 1] plus its landmarks."""
    n = SIDE * SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / SUPERSAMPLE
    yy, xx = np.meshgrid(coords, coords, indexing="ij")

    base = rng.uniform(0.3, 0.7) + rng.uniform(-0.08, 0.08, size=3)
    img = np.broadcast_to(np.clip(base, 0, 1)[:, None, None], (3, n, n)).copy()
    _paint_clutter(img, yy, xx, nuis.clutter, rng)

    cu, cv = SIDE / 2 + nuis.shift_u, SIDE / 2 + nuis.shift_v
    theta = math.radians(nuis.angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    dx, dy = xx - cv, yy - cu
    # pixel -> vehicle frame: rotate by -theta, undo scale
    x = (cos_t * dx + sin_t * dy) / nuis.scale
    y = (-sin_t * dx + cos_t * dy) / nuis.scale

    half_l = shape.length / 2
    half_h = shape.length * shape.aspect / 2
    corner = min(3.0, half_h * 0.6)
    qx = np.maximum(np.abs(x) - (half_l - corner), 0)
    qy = np.maximum(np.abs(y) - (half_h - corner), 0)
    body = qx ** 2 + qy ** 2 <= corner ** 2
    cab_half = shape.cabin_len * half_l
    cab_cx = shape.cabin_shift * half_l
    cab_h = shape.cabin_height * 2 * half_h
    cabin = (np.abs(x - cab_cx) <= cab_half) & (y >= -half_h - cab_h) & (y <= -half_h + 1)
    window = (np.abs(x - cab_cx) <= cab_half - 1.5) & (y >= -half_h - cab_h + 1.5) & (y <= -half_h)
    paint = shape.color
    img[:, body | cabin] = paint[:, None]
    img[:, window] = (0.55 * paint + 0.35)[:, None]

    marks = _canonical_landmarks(shape)
    r = shape.wheel_radius
    for wx, wy in marks[:2]:
        d2 = (x - wx) ** 2 + (y - wy) ** 2
        img[:, d2 <= r ** 2] = 0.08
        img[:, d2 <= (0.4 * r) ** 2] = 0.6
    lamp_colors = (np.array([0.95, 0.1, 0.1]), np.array([1.0, 1.0, 0.7]))
    for (lx, ly), color in zip(marks[2:], lamp_colors):
        img[:, (x - lx) ** 2 + (y - ly) ** 2 <= 1.8 ** 2] = color[:, None]

    img = img.reshape(3, SIDE, SUPERSAMPLE, SIDE, SUPERSAMPLE).mean(axis=(2, 4))
    img = img * CAMERA_GAIN[camera % len(CAMERA_GAIN)]
    img = np.clip(img + rng.normal(0, nuis.noise_sigma, size=img.shape), 0, 1)

    landmarks = []
    for name, (mx, my) in zip(LANDMARK_NAMES, marks):
        px, py = mx * nuis.scale, my * nuis.scale
        v = cv + cos_t * px - sin_t * py
        u = cu + sin_t * px + cos_t * py
        u = min(max(u, 0.0), SIDE - 0.01)
        v = min(max(v, 0.0), SIDE - 0.01)
        landmarks.append((name, round(u, 2), round(v, 2)))
    return img, tuple(landmarks)


def assign_split(identity: int, index: int, n_train_ids: int, n_id: int) -> str:
    if n_train_ids == n_id:
        # no held-out identities: hold out the first two images of every identity
        return {0: "query", 1: "gallery"}.get(index, "train")
    if identity < n_train_ids:
        return "train"
    return "query" if index < 2 else "gallery"


def synthesize(n_id: int, imgs_per_id: int, seed: int, n_test_ids: Optional[int] = None,
               n_cameras: int = 4):
    """In-memory dataset: list of (image, Record-without-path) pairs."""
    if n_id < 2:
        raise ValueError(f"need at least 2 identities, got {n_id}")
    if imgs_per_id < 2:
        raise ValueError(f"need at least 2 images per identity, got {imgs_per_id}")
    n_test = n_id // 5 if n_test_ids is None else n_test_ids
    if not 0 <= n_test <= n_id - 2:
        raise ValueError(f"n_test_ids={n_test} leaves fewer than 2 training identities")
    root = np.random.SeedSequence(seed)
    id_seq, *img_seqs = root.spawn(n_id + 1)
    shapes = sample_identities(n_id, np.random.default_rng(id_seq))
    n_train = n_id - n_test
    out = []
    tracks = {}
    for identity, (shape, seq) in enumerate(zip(shapes, img_seqs)):
        rng = np.random.default_rng(seq)
        for index in range(imgs_per_id):
            camera = index % n_cameras
            img, marks = render(shape, sample_nuisance(rng), camera, rng)
            track = tracks.setdefault((identity, camera), len(tracks))
            split = assign_split(identity, index, n_train, n_id)
            rec = Record(f"images/{identity:04d}_{index:03d}.ppm", identity, camera, track,
                         split, marks)
            out.append((img, rec))
    return out


def generate_synthetic(out_dir, n_id: int, imgs_per_id: int, seed: int,
                       n_test_ids: Optional[int] = None, n_cameras: int = 4) -> Manifest:
    """Write images (binary PPM) and ``manifest.tsv`` under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for img, rec in synthesize(n_id, imgs_per_id, seed, n_test_ids, n_cameras):
        pnm.write_chw(out_dir / rec.path, img)
        records.append(rec)
    manifest = Manifest(records, out_dir)
    manifest.validate()
    manifest.write(out_dir / "manifest.tsv")
    return manifest
