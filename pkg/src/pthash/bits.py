"""Packed bit storage over little-endian uint64 words, LSB-first."""
from __future__ import annotations

import numba as nb
import numpy as np

from .errors import SerializationError
from .serial import Reader, Writer

_ONES = np.uint64(0xFFFFFFFFFFFFFFFF)


@nb.njit(cache=True, nogil=True, inline="always")
def low_mask(width):
    if width >= 64:
        return np.uint64(0xFFFFFFFFFFFFFFFF)
    return (np.uint64(1) << np.uint64(width)) - np.uint64(1)


@nb.njit(cache=True, nogil=True)
def read_bits(words, pos, width):
    pos = np.int64(pos)
    width = np.int64(width)
    if width == 0:
        return np.uint64(0)
    w = pos >> 6
    off = pos & 63
    x = words[w] >> np.uint64(off)
    if off + width > 64:
        x |= words[w + 1] << np.uint64(64 - off)
    return x & low_mask(width)


@nb.njit(cache=True, nogil=True)
def write_bits(words, pos, width, value):
    pos = np.int64(pos)
    width = np.int64(width)
    if width == 0:
        return
    value &= low_mask(width)
    w = pos >> 6
    off = pos & 63
    words[w] |= value << np.uint64(off)
    if off + width > 64:
        words[w + 1] |= value >> np.uint64(64 - off)


@nb.njit(cache=True, nogil=True)
def pack_uniform(values, width, words):
    for i in range(values.shape[0]):
        write_bits(words, i * width, width, np.uint64(values[i]))


@nb.njit(cache=True, nogil=True)
def gather_uniform(words, width, indices, out):
    for j in range(indices.shape[0]):
        out[j] = read_bits(words, indices[j] * width, width)


@nb.njit(cache=True, nogil=True, inline="always")
def popcount64(x):
    x = x - ((x >> np.uint64(1)) & np.uint64(0x5555555555555555))
    x = (x & np.uint64(0x3333333333333333)) + ((x >> np.uint64(2)) & np.uint64(0x3333333333333333))
    x = (x + (x >> np.uint64(4))) & np.uint64(0x0F0F0F0F0F0F0F0F)
    return int((x * np.uint64(0x0101010101010101)) >> np.uint64(56))


def words_for(nbits: int) -> int:
    return (nbits + 63) >> 6


def bit_width(max_value: int) -> int:
    """Bits needed for values in [0, max_value]; at least 1."""
    return max(1, int(max_value).bit_length())


class CompactBitArray:
    """Fixed-width integer array: element i occupies bits [i*width, (i+1)*width)."""

    __slots__ = ("words", "width", "length")

    def __init__(self, words: np.ndarray, width: int, length: int) -> None:
        self.words = words
        self.width = width
        self.length = length

    @classmethod
    def from_values(cls, values, width: int | None = None) -> "CompactBitArray":
        vals = np.ascontiguousarray(values, dtype=np.uint64)
        if width is None:
            width = bit_width(int(vals.max()) if len(vals) else 0)
        if not 1 <= width <= 64:
            raise ValueError(f"width must be in [1, 64], got {width}")
        words = np.zeros(words_for(len(vals) * width), dtype=np.uint64)
        pack_uniform(vals, width, words)
        return cls(words, width, len(vals))

    def __len__(self) -> int:
        return self.length

    def __getitem__(self, i: int) -> int:
        if not 0 <= i < self.length:
            raise IndexError(i)
        return int(read_bits(self.words, i * self.width, self.width))

    def take(self, indices: np.ndarray) -> np.ndarray:
        idx = np.ascontiguousarray(indices, dtype=np.int64)
        out = np.empty(len(idx), dtype=np.uint64)
        gather_uniform(self.words, self.width, idx, out)
        return out

    def to_numpy(self) -> np.ndarray:
        return self.take(np.arange(self.length))

    @property
    def nbits(self) -> int:
        return self.width * self.length

    def write(self, out: Writer, *, width: bool = True, length: bool = True) -> None:
        """Header fields the reader can derive elsewhere may be left out."""
        if width:
            out.u64(self.width)
        if length:
            out.u64(self.length)
        out.bitmap(self.words)

    @classmethod
    def read(cls, src: Reader, *, width: int | None = None, length: int | None = None
             ) -> "CompactBitArray":
        width = src.u64() if width is None else width
        length = src.u64() if length is None else length
        if not 1 <= width <= 64:
            raise SerializationError(f"invalid element width {width}")
        return cls(src.bitmap(words_for(width * length)), width, length)
