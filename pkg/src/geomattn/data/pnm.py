"""Binary PGM (P5) and PPM (P6) reading and writing, 8-bit only."""

from __future__ import annotations

import numpy as np


class PNMError(ValueError):
    pass


def encode(img: np.ndarray) -> bytes:
    """Encode a uint8 array, [h, w] as P5 or [h, w, 3] as P6."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise PNMError(f"expected uint8 pixels, got {img.dtype}")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise PNMError(f"unsupported image shape {img.shape}")
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


def _tokens(data: bytes, count: int):
    """Pull ``count`` whitespace-separated header tokens, skipping comments."""
    out, pos = [], 0
    while len(out) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PNMError("truncated header")
        out.append(data[start:pos])
    return out, pos + 1


def decode(data: bytes) -> np.ndarray:
    (magic, w, h, maxval), pos = _tokens(data, 4)
    if magic not in (b"P5", b"P6"):
        raise PNMError(f"unknown format {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise PNMError(f"only 8-bit images are supported (maxval {maxval})")
    channels = 1 if magic == b"P5" else 3
    n = w * h * channels
    body = data[pos:pos + n]
    if len(body) != n:
        raise PNMError(f"pixel data holds {len(body)} bytes, expected {n}")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(h, w) if channels == 1 else arr.reshape(h, w, 3)


def write(path, img: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(img))


def read(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)


def read_chw(path) -> np.ndarray:
    """Read an image as float64 [c, h, w] in [0, 1]."""
    img = read(path).astype(np.float64) / 255.0
    return img[None] if img.ndim == 2 else img.transpose(2, 0, 1).copy()


def write_chw(path, x: np.ndarray) -> None:
    x = np.asarray(x)
    write(path, to_uint8(x[0] if x.shape[0] == 1 else x.transpose(1, 2, 0)))
