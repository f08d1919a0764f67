"""GATN binary tensor container.

Layout: magic ``b"GATN"``, version (u8), rank (u8), each axis length as a
little-endian u32, then the payload as little-endian f64 in row-major order.
"""

from __future__ import annotations

import io
import struct
from typing import BinaryIO, Union

import numpy as np

from .tensor import Tensor

MAGIC = b"GATN"
VERSION = 1


class GATNFormatError(ValueError):
    pass


def dumps(t: Union[Tensor, np.ndarray]) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    if arr.ndim > 255:
        raise GATNFormatError(f"rank {arr.ndim} exceeds 255")
    header = MAGIC + struct.pack("<BB", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def read(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise GATNFormatError(f"bad magic {magic!r}")
    raw = fh.read(2)
    if len(raw) != 2:
        raise GATNFormatError("truncated header")
    version, rank = struct.unpack("<BB", raw)
    if version != VERSION:
        raise GATNFormatError(f"unsupported version {version}")
    dims_raw = fh.read(4 * rank)
    if len(dims_raw) != 4 * rank:
        raise GATNFormatError("truncated shape")
    shape = struct.unpack(f"<{rank}I", dims_raw)
    count = int(np.prod(shape, dtype=np.int64))
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise GATNFormatError(f"payload holds {len(payload)} bytes, expected {8 * count}")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def loads(blob: bytes) -> np.ndarray:
    return read(io.BytesIO(blob))


def save(path, t) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(t))


def load(path) -> Tensor:
    with open(path, "rb") as fh:
        return Tensor(read(fh))
