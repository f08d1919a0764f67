"""Dataset manifest: one TSV row per image.

Columns: ``path identity camera track split landmarks``. Landmarks are
encoded as ``name:u:v;name:u:v`` with ``u`` the row and ``v`` the column in
pixels; an empty field means no landmarks.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from . import pnm

HEADER = ("path", "identity", "camera", "track", "split", "landmarks")
SPLITS = ("train", "query", "gallery")

Landmark = Tuple[str, float, float]


@dataclass(frozen=True)
class Record:
    path: str
    identity: int
    camera: int
    track: int
    split: str
    landmarks: Tuple[Landmark, ...] = ()


def encode_landmarks(landmarks) -> str:
    return ";".join(f"{name}:{u!r}:{v!r}" for name, u, v in landmarks)


def decode_landmarks(text: str) -> Tuple[Landmark, ...]:
    if not text:
        return ()
    out = []
    for item in text.split(";"):
        name, u, v = item.split(":")
        out.append((name, float(u), float(v)))
    return tuple(out)


@dataclass
class Manifest:
    records: List[Record] = field(default_factory=list)
    root: Path = Path(".")

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> List[int]:
        return [i for i, r in enumerate(self.records) if r.split == name]

    def validate(self) -> None:
        ids = sorted({r.identity for r in self.records})
        if ids != list(range(len(ids))):
            raise ValueError("identity ids must be dense in [0, n_id)")
        for r in self.records:
            if r.split not in SPLITS:
                raise ValueError(f"unknown split {r.split!r} for {r.path}")
        track_ids: Dict[int, int] = {}
        for r in self.records:
            if track_ids.setdefault(r.track, r.identity) != r.identity:
                raise ValueError(f"track {r.track} spans several identities")
        gallery_ids = {r.identity for r in self.records if r.split == "gallery"}
        lost = {r.identity for r in self.records if r.split == "query"} - gallery_ids
        if lost:
            raise ValueError(f"query identities absent from gallery: {sorted(lost)}")

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
            writer.writerow(HEADER)
            for r in self.records:
                writer.writerow([r.path, r.identity, r.camera, r.track, r.split,
                                 encode_landmarks(r.landmarks)])

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        with open(path, newline="") as fh:
            reader = csv.reader(fh, delimiter="\t")
            header = tuple(next(reader))
            if header != HEADER:
                raise ValueError(f"unexpected manifest header {header}")
            records = [Record(row[0], int(row[1]), int(row[2]), int(row[3]), row[4],
                              decode_landmarks(row[5] if len(row) > 5 else ""))
                       for row in reader if row]
        return cls(records, path.parent)

    def load_images(self, indices=None) -> np.ndarray:
        """Stack images as float64 [n, c, h, w] in [0, 1]."""
        idx = range(len(self.records)) if indices is None else indices
        return np.stack([pnm.read_chw(self.root / self.records[i].path) for i in idx])


def load_dataset(directory) -> Manifest:
    return Manifest.read(Path(directory) / "manifest.tsv")
