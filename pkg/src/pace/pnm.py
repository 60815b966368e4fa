"""Binary PPM (P6) / PGM (P5) reading and writing, 8-bit only."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def _header(kind: bytes, width: int, height: int) -> bytes:
    return kind + b"\n%d %d\n255\n" % (width, height)


def write_ppm(path, image: np.ndarray) -> None:
    """Write an HxWx3 float image in [0, 1]."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got {img.shape}")
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(_header(b"P6", img.shape[1], img.shape[0]) + data.tobytes())


def write_pgm(path, image: np.ndarray) -> None:
    """Write an HxW uint8 image (values used as-is)."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"expected HxW image, got {img.shape}")
    data = np.clip(img, 0, 255).astype(np.uint8)
    Path(path).write_bytes(_header(b"P5", img.shape[1], img.shape[0]) + data.tobytes())


def _parse(data: bytes, magic: bytes):
    if data[:2] != magic:
        raise ValueError(f"not a {magic.decode()} file")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    width, height, maxval = fields
    if maxval != 255:
        raise ValueError("only 8-bit PNM files are supported")
    return width, height, data[pos + 1:]


def read_ppm(path) -> np.ndarray:
    """Read a P6 file as an HxWx3 float64 image in [0, 1]."""
    w, h, raw = _parse(Path(path).read_bytes(), b"P6")
    if len(raw) < w * h * 3:
        raise ValueError("truncated PPM data")
    return np.frombuffer(raw[:w * h * 3], dtype=np.uint8).reshape(h, w, 3) / 255.0


def read_pgm(path) -> np.ndarray:
    w, h, raw = _parse(Path(path).read_bytes(), b"P5")
    if len(raw) < w * h:
        raise ValueError("truncated PGM data")
    return np.frombuffer(raw[:w * h], dtype=np.uint8).reshape(h, w).copy()
