"""Little-endian binary writer/reader with 8-byte alignment for arrays."""
from __future__ import annotations

import struct

import numpy as np

from .errors import TruncatedStream


class Writer:
    def __init__(self) -> None:
        self.parts: list[bytes] = []
        self.offset = 0

    def raw(self, data: bytes) -> None:
        self.parts.append(data)
        self.offset += len(data)

    def u8(self, value: int) -> None:
        self.raw(struct.pack("<B", value))

    def u64(self, value: int) -> None:
        self.raw(struct.pack("<Q", value))

    def f64(self, value: float) -> None:
        self.raw(struct.pack("<d", value))

    def align(self) -> None:
        pad = -self.offset % 8
        if pad:
            self.raw(b"\0" * pad)

    def bitmap(self, arr: np.ndarray) -> None:
        """Raw uint64 words, 8-byte aligned; the reader must know the count."""
        self.align()
        self.raw(np.ascontiguousarray(arr, dtype="<u8").tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class Reader:
    def __init__(self, data: bytes, offset: int = 0) -> None:
        self.data = memoryview(data)
        self.offset = offset

    def raw(self, size: int) -> bytes:
        end = self.offset + size
        if size < 0 or end > len(self.data):
            raise TruncatedStream(
                f"need {size} bytes at offset {self.offset}, stream has {len(self.data)}"
            )
        out = bytes(self.data[self.offset:end])
        self.offset = end
        return out

    def u8(self) -> int:
        return self.raw(1)[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.raw(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.raw(8))[0]

    def align(self) -> None:
        self.raw(-self.offset % 8)

    def bitmap(self, count: int) -> np.ndarray:
        self.align()
        if count > (len(self.data) - self.offset) // 8:
            raise TruncatedStream(f"array of {count} words overruns stream")
        return np.frombuffer(self.raw(8 * count), dtype="<u8").astype(np.uint64)

    def at_end(self) -> bool:
        return self.offset == len(self.data)
