"""Little-endian binary container shared by all checkpoints.

Layout: 8-byte ASCII magic, u32 version, then a payload of u32 / f64
scalars and tensors. A tensor is written as u32 rank, rank u32 extents and
the raw f64 data in row-major order.
"""
from __future__ import annotations

import struct

import numpy as np

VERSION = 1


class FormatError(ValueError):
    pass


class Writer:
    def __init__(self, magic: bytes, version: int = VERSION):
        if len(magic) != 8:
            raise ValueError("magic must be 8 bytes")
        self._parts = [magic, struct.pack("<I", version)]

    def u32(self, value: int) -> None:
        self._parts.append(struct.pack("<I", int(value)))

    def f64(self, value: float) -> None:
        self._parts.append(struct.pack("<d", float(value)))

    def u32s(self, values) -> None:
        values = [int(v) for v in values]
        self.u32(len(values))
        self._parts.append(struct.pack(f"<{len(values)}I", *values))

    def f64s(self, values) -> None:
        values = [float(v) for v in values]
        self.u32(len(values))
        self._parts.append(struct.pack(f"<{len(values)}d", *values))

    def tensor(self, arr: np.ndarray) -> None:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        self.u32s(arr.shape)
        self._parts.append(arr.tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes, magic: bytes, version: int = VERSION):
        self._data = memoryview(data)
        self._pos = 0
        got = bytes(self._take(8))
        if got != magic:
            raise FormatError(f"bad magic {got!r}, expected {magic!r}")
        v = self.u32()
        if v != version:
            raise FormatError(f"unsupported version {v}, expected {version}")

    def _take(self, n: int) -> memoryview:
        if self._pos + n > len(self._data):
            raise FormatError(f"truncated data: needed {n} bytes at offset {self._pos}")
        chunk = self._data[self._pos:self._pos + n]
        self._pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def u32s(self) -> list[int]:
        n = self.u32()
        return list(struct.unpack(f"<{n}I", self._take(4 * n)))

    def f64s(self) -> list[float]:
        n = self.u32()
        return list(struct.unpack(f"<{n}d", self._take(8 * n)))

    def tensor(self) -> np.ndarray:
        shape = tuple(self.u32s())
        count = int(np.prod(shape)) if shape else 1
        raw = self._take(8 * count)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)

    def done(self) -> None:
        if self._pos != len(self._data):
            raise FormatError(f"{len(self._data) - self._pos} trailing bytes")
