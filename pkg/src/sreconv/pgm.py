"""Binary greyscale PGM (P5, maxval 255) reading and writing."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import PgmError, ShapeError

_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def to_uint8(x, lo=None, hi=None) -> np.ndarray:
    """Min-max scale to 0..255; a constant image maps to 0."""
    x = np.asarray(x, dtype=np.float64)
    lo = float(x.min()) if lo is None else lo
    hi = float(x.max()) if hi is None else hi
    if hi <= lo:
        return np.zeros(x.shape, dtype=np.uint8)
    return np.round((x - lo) / (hi - lo) * 255).clip(0, 255).astype(np.uint8)


def pgm_bytes(img) -> bytes:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ShapeError(f"PGM needs a 2D uint8 image, got {img.dtype} {img.shape}")
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


def write_pgm(path, img) -> Path:
    path = Path(path)
    path.write_bytes(pgm_bytes(img))
    return path


def read_pgm(data: bytes) -> np.ndarray:
    m = _HEADER.match(data)
    if m is None:
        raise PgmError("not a binary P5 PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise PgmError(f"unsupported maxval {maxval}")
    body = data[m.end():]
    if len(body) != w * h:
        raise PgmError(f"expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)
