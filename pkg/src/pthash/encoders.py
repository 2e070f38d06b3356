"""Random-access compressed integer sequences for the pilots table and free array.

Three pilot encoders share one small interface (``encode``, ``__getitem__``,
``take``, ``nbits``, ``write``/``read``):

* ``PartitionedCompact`` (PC): blocks of ``b`` values, each block stored at the
  bit width of its maximum, plus a prefix table of cumulative widths.
* ``PrefixSumEliasFano`` (EF): Elias-Fano over the prefix sums of the pilots.
* ``FrontBackDictionary`` (D-D): separate value dictionaries for the dense
  front and the sparse back of the table.

``EliasFano`` is also used directly for the (monotone) free array.
"""
from __future__ import annotations

import math

import numba as nb
import numpy as np

from .bits import (
    CompactBitArray,
    bit_width,
    popcount64,
    read_bits,
    words_for,
    write_bits,
)
from .errors import EncodingError, SerializationError
from .serial import Reader, Writer

TAG_PC = 1
TAG_EF = 2
TAG_DD = 3
TAG_ELIAS_FANO = 4

ENCODER_TAGS = {"pc": TAG_PC, "ef": TAG_EF, "dd": TAG_DD}
ENCODER_NAMES = {v: k for k, v in ENCODER_TAGS.items()}

PC_BLOCK_SIZE = 256
EF_SELECT_SAMPLE = 1024
FRONT_FRACTION = 0.3


# -- partitioned compact ------------------------------------------------------


@nb.njit(cache=True, nogil=True)
def _pc_pack(values, block_size, prefix, words):
    for i in range(values.shape[0]):
        block = i // block_size
        lo = np.int64(prefix[block])
        w = np.int64(prefix[block + 1]) - lo
        pos = lo * block_size + (i - block * block_size) * w
        write_bits(words, pos, w, np.uint64(values[i]))


@nb.njit(cache=True, nogil=True)
def pc_get(prefix_words, prefix_width, payload, block_size, i):
    block = i // block_size
    offset = i - block * block_size
    lo = np.int64(read_bits(prefix_words, block * prefix_width, prefix_width))
    hi = np.int64(read_bits(prefix_words, (block + 1) * prefix_width, prefix_width))
    w = hi - lo
    position = lo * block_size + offset * w
    return read_bits(payload, position, w)


@nb.njit(cache=True, nogil=True)
def _pc_take(prefix_words, prefix_width, payload, block_size, indices, out):
    for j in range(indices.shape[0]):
        out[j] = pc_get(prefix_words, prefix_width, payload, block_size, indices[j])


class PartitionedCompact:
    tag = TAG_PC

    def __init__(self, block_size: int, length: int, prefix: CompactBitArray, payload: np.ndarray):
        self.block_size = block_size
        self.length = length
        self.prefix = prefix
        self.payload = payload

    @classmethod
    def encode(cls, values, block_size: int = PC_BLOCK_SIZE) -> "PartitionedCompact":
        vals = np.ascontiguousarray(values, dtype=np.uint64)
        m = len(vals)
        nblocks = -(-m // block_size)
        padded = np.zeros(nblocks * block_size, dtype=np.uint64)
        padded[:m] = vals
        maxima = padded.reshape(nblocks, block_size).max(axis=1) if nblocks else padded
        widths = np.array([bit_width(int(x)) for x in maxima], dtype=np.uint64)
        prefix = np.zeros(nblocks + 1, dtype=np.uint64)
        np.cumsum(widths, out=prefix[1:])
        # the last block only stores its real elements
        total = int(prefix[-2]) * block_size + (m - (nblocks - 1) * block_size) * int(widths[-1]) if m else 0
        payload = np.zeros(words_for(total), dtype=np.uint64)
        _pc_pack(vals, block_size, prefix, payload)
        return cls(block_size, m, CompactBitArray.from_values(prefix), payload)

    @property
    def widths(self) -> list[int]:
        w = self.prefix.to_numpy().tolist()
        return [b - a for a, b in zip(w[:-1], w[1:])]

    @property
    def payload_bits(self) -> int:
        widths = self.widths
        if not widths:
            return 0
        last = self.length - (len(widths) - 1) * self.block_size
        return sum(widths[:-1]) * self.block_size + last * widths[-1]

    def __len__(self) -> int:
        return self.length

    def __getitem__(self, i: int) -> int:
        if not 0 <= i < self.length:
            raise IndexError(i)
        return int(pc_get(self.prefix.words, self.prefix.width, self.payload, self.block_size, i))

    def take(self, indices: np.ndarray) -> np.ndarray:
        idx = np.ascontiguousarray(indices, dtype=np.int64)
        out = np.empty(len(idx), dtype=np.uint64)
        _pc_take(self.prefix.words, self.prefix.width, self.payload, self.block_size, idx, out)
        return out

    @property
    def nbits(self) -> int:
        return 64 * len(self.payload) + 64 * len(self.prefix.words)

    def write(self, out: Writer) -> None:
        out.u8(self.tag)
        out.align()
        out.u64(self.block_size)
        out.u64(self.length)
        self.prefix.write(out, length=False)
        out.bitmap(self.payload)

    @classmethod
    def read(cls, src: Reader) -> "PartitionedCompact":
        src.align()
        block_size = src.u64()
        length = src.u64()
        if block_size == 0:
            raise SerializationError("partitioned-compact block size is zero")
        prefix = CompactBitArray.read(src, length=-(-length // block_size) + 1)
        out = cls(block_size, length, prefix, np.zeros(0, dtype=np.uint64))
        widths = out.widths
        if any(not 0 < w <= 64 for w in widths) or (widths and out.prefix[0] != 0):
            raise SerializationError("corrupt partitioned-compact prefix table")
        out.payload = src.bitmap(words_for(out.payload_bits))
        return out


# -- Elias-Fano ---------------------------------------------------------------


@nb.njit(cache=True, nogil=True)
def _ef_build(values, low_bits, low, high):
    for i in range(values.shape[0]):
        v = np.uint64(values[i])
        write_bits(low, i * low_bits, low_bits, v)
        pos = np.int64(v >> np.uint64(low_bits)) + i
        high[pos >> 6] |= np.uint64(1) << np.uint64(pos & 63)


@nb.njit(cache=True, nogil=True)
def _select1(high, samples, sample_rate, i):
    start = np.int64(samples[i // sample_rate])
    k = i - (i // sample_rate) * sample_rate
    w = start >> 6
    x = high[w] & ~((np.uint64(1) << np.uint64(start & 63)) - np.uint64(1))
    c = popcount64(x)
    while c <= k:
        k -= c
        w += 1
        x = high[w]
        c = popcount64(x)
    for _ in range(k):
        x &= x - np.uint64(1)
    tz = popcount64((x & (~x + np.uint64(1))) - np.uint64(1))
    return w * 64 + tz


@nb.njit(cache=True, nogil=True)
def ef_get(low, low_bits, high, samples, sample_rate, i):
    hi = np.uint64(np.int64(_select1(high, samples, sample_rate, i)) - i)
    return (hi << np.uint64(low_bits)) | read_bits(low, i * low_bits, low_bits)


@nb.njit(cache=True, nogil=True)
def _ef_take(low, low_bits, high, samples, sample_rate, indices, out):
    for j in range(indices.shape[0]):
        out[j] = ef_get(low, low_bits, high, samples, sample_rate, indices[j])


class EliasFano:
    """Monotone sequence; element i is (select1(high, i) - i) << l | low[i]."""

    tag = TAG_ELIAS_FANO

    def __init__(self, length: int, universe: int, low_bits: int, low: np.ndarray,
                 high: np.ndarray, samples: np.ndarray, high_bits: int,
                 sample_rate: int = EF_SELECT_SAMPLE):
        self.length = length
        self.universe = universe
        self.low_bits = low_bits
        self.low = low
        self.high = high
        self.samples = samples
        self.high_bits = high_bits
        self.sample_rate = sample_rate

    @classmethod
    def encode(cls, values, universe: int | None = None) -> "EliasFano":
        vals = np.ascontiguousarray(values, dtype=np.uint64)
        n = len(vals)
        if universe is None:
            universe = int(vals[-1]) + 1 if n else 0
        if n:
            if np.any(vals[1:] < vals[:-1]):
                raise EncodingError("Elias-Fano input must be non-decreasing")
            if int(vals[-1]) >= universe:
                raise EncodingError(f"value {int(vals[-1])} outside universe {universe}")
        low_bits, high_bits = cls.layout(n, universe)
        low = np.zeros(words_for(n * low_bits), dtype=np.uint64)
        high = np.zeros(words_for(high_bits), dtype=np.uint64)
        _ef_build(vals, low_bits, low, high)
        hi_pos = (vals >> np.uint64(low_bits)).astype(np.int64) + np.arange(n, dtype=np.int64)
        samples = np.ascontiguousarray(hi_pos[::EF_SELECT_SAMPLE], dtype=np.int64)
        return cls(n, universe, low_bits, low, high, samples, high_bits)

    @staticmethod
    def layout(n: int, universe: int) -> tuple[int, int]:
        """(low bits per element, high bitmap length) for n values below universe."""
        if not n:
            return 0, 0
        low_bits = (universe // n).bit_length() - 1 if universe > n else 0
        return low_bits, n + ((universe - 1) >> low_bits) + 1

    def __len__(self) -> int:
        return self.length

    def __getitem__(self, i: int) -> int:
        if not 0 <= i < self.length:
            raise IndexError(i)
        return int(ef_get(self.low, self.low_bits, self.high, self.samples, self.sample_rate, i))

    def take(self, indices: np.ndarray) -> np.ndarray:
        idx = np.ascontiguousarray(indices, dtype=np.int64)
        out = np.empty(len(idx), dtype=np.uint64)
        _ef_take(self.low, self.low_bits, self.high, self.samples, self.sample_rate, idx, out)
        return out

    @property
    def nbits(self) -> int:
        """Logical size: low bits + high bitmap + select samples."""
        return self.length * self.low_bits + self.high_bits + 64 * len(self.samples)

    def write(self, out: Writer) -> None:
        out.u8(self.tag)
        self.write_body(out)

    def write_body(self, out: Writer) -> None:
        # everything else follows from length and universe
        out.align()
        out.u64(self.length)
        out.u64(self.universe)
        out.bitmap(self.low)
        out.bitmap(self.high)
        out.bitmap(self.samples.astype(np.uint64))

    @classmethod
    def read(cls, src: Reader) -> "EliasFano":
        src.align()
        length, universe = src.u64(), src.u64()
        if length and universe < 1:
            raise SerializationError("Elias-Fano universe is empty")
        if length > 8 * len(src.data):
            raise SerializationError("Elias-Fano length overruns stream")
        low_bits, high_bits = cls.layout(length, universe)
        low = src.bitmap(words_for(length * low_bits))
        high = src.bitmap(words_for(high_bits))
        samples = src.bitmap(-(-length // EF_SELECT_SAMPLE)).astype(np.int64)
        if len(samples) and (samples.max() >= high_bits or samples.min() < 0):
            raise SerializationError("Elias-Fano select sample out of range")
        return cls(length, universe, low_bits, low, high, samples, high_bits)


class PrefixSumEliasFano:
    """Pilots stored as Elias-Fano prefix sums; P[i] = S[i+1] - S[i]."""

    tag = TAG_EF

    def __init__(self, sums: EliasFano):
        self.sums = sums

    @classmethod
    def encode(cls, values) -> "PrefixSumEliasFano":
        vals = np.ascontiguousarray(values, dtype=np.uint64)
        sums = np.zeros(len(vals) + 1, dtype=np.uint64)
        np.cumsum(vals, out=sums[1:])
        if len(vals) and int(sums[-1]) < int(vals.max()):
            raise EncodingError("pilot prefix sums overflow 64 bits")
        return cls(EliasFano.encode(sums, int(sums[-1]) + 1))

    def __len__(self) -> int:
        return max(len(self.sums) - 1, 0)

    def __getitem__(self, i: int) -> int:
        if not 0 <= i < len(self):
            raise IndexError(i)
        return self.sums[i + 1] - self.sums[i]

    def take(self, indices: np.ndarray) -> np.ndarray:
        idx = np.ascontiguousarray(indices, dtype=np.int64)
        return self.sums.take(idx + 1) - self.sums.take(idx)

    @property
    def nbits(self) -> int:
        return self.sums.nbits

    def write(self, out: Writer) -> None:
        out.u8(self.tag)
        self.sums.write_body(out)

    @classmethod
    def read(cls, src: Reader) -> "PrefixSumEliasFano":
        sums = EliasFano.read(src)
        if not len(sums):
            raise SerializationError("prefix sums need at least one element")
        return cls(sums)


# -- front-back dictionary ------------------------------------------------------


class _DictRegion:
    """Sorted distinct values plus a fixed-width rank per element."""

    def __init__(self, dictionary: CompactBitArray, ranks: CompactBitArray):
        self.dictionary = dictionary
        self.ranks = ranks

    @staticmethod
    def rank_width(d: int) -> int:
        return max(1, math.ceil(math.log2(d))) if d > 1 else 1

    @classmethod
    def encode(cls, values: np.ndarray) -> "_DictRegion":
        distinct, ranks = np.unique(values, return_inverse=True)
        return cls(
            CompactBitArray.from_values(distinct),
            CompactBitArray.from_values(ranks.astype(np.uint64), cls.rank_width(len(distinct))),
        )

    def take(self, local: np.ndarray) -> np.ndarray:
        return self.dictionary.take(self.ranks.take(local).astype(np.int64))

    def write(self, out: Writer) -> None:
        self.dictionary.write(out)
        self.ranks.write(out, width=False, length=False)

    @classmethod
    def read(cls, src: Reader, length: int) -> "_DictRegion":
        dictionary = CompactBitArray.read(src)
        if length and not len(dictionary):
            raise SerializationError("dictionary region has ranks but no values")
        ranks = CompactBitArray.read(src, width=cls.rank_width(len(dictionary)), length=length)
        return cls(dictionary, ranks)


class FrontBackDictionary:
    tag = TAG_DD

    def __init__(self, split: int, front: _DictRegion, back: _DictRegion):
        self.split = split
        self.front = front
        self.back = back

    @classmethod
    def encode(cls, values) -> "FrontBackDictionary":
        vals = np.ascontiguousarray(values, dtype=np.uint64)
        split = math.ceil(FRONT_FRACTION * len(vals))
        return cls(split, _DictRegion.encode(vals[:split]), _DictRegion.encode(vals[split:]))

    def __len__(self) -> int:
        return len(self.front.ranks) + len(self.back.ranks)

    def __getitem__(self, i: int) -> int:
        if not 0 <= i < len(self):
            raise IndexError(i)
        if i < self.split:
            return self.front.dictionary[self.front.ranks[i]]
        return self.back.dictionary[self.back.ranks[i - self.split]]

    def take(self, indices: np.ndarray) -> np.ndarray:
        idx = np.ascontiguousarray(indices, dtype=np.int64)
        out = np.empty(len(idx), dtype=np.uint64)
        in_front = idx < self.split
        out[in_front] = self.front.take(idx[in_front])
        out[~in_front] = self.back.take(idx[~in_front] - self.split)
        return out

    @property
    def nbits(self) -> int:
        parts = (self.front.dictionary, self.front.ranks, self.back.dictionary, self.back.ranks)
        return sum(64 * len(p.words) for p in parts)

    def write(self, out: Writer) -> None:
        out.u8(self.tag)
        out.align()
        out.u64(len(self))
        out.u64(self.split)
        self.front.write(out)
        self.back.write(out)

    @classmethod
    def read(cls, src: Reader) -> "FrontBackDictionary":
        src.align()
        length, split = src.u64(), src.u64()
        if split > length:
            raise SerializationError("front region longer than the table")
        front = _DictRegion.read(src, split)
        back = _DictRegion.read(src, length - split)
        return cls(split, front, back)


PILOT_ENCODERS = {
    TAG_PC: PartitionedCompact,
    TAG_EF: PrefixSumEliasFano,
    TAG_DD: FrontBackDictionary,
}


def encode_pilots(values, encoder: str):
    try:
        cls = PILOT_ENCODERS[ENCODER_TAGS[encoder]]
    except KeyError:
        raise ValueError(f"unknown encoder {encoder!r}; choose from {sorted(ENCODER_TAGS)}") from None
    return cls.encode(values)


def read_encoder(src: Reader):
    tag = src.u8()
    if tag == TAG_ELIAS_FANO:
        return EliasFano.read(src)
    try:
        cls = PILOT_ENCODERS[tag]
    except KeyError:
        raise SerializationError(f"unknown encoder tag {tag}") from None
    return cls.read(src)


# Operation-style aliases.


def pc_encode(values, block_size: int = PC_BLOCK_SIZE) -> PartitionedCompact:
    return PartitionedCompact.encode(values, block_size)


def pc_access(pc: PartitionedCompact, i: int) -> int:
    return pc[i]


def ef_encode(values, universe: int | None = None) -> EliasFano:
    return EliasFano.encode(values, universe)


def ef_access(ef: EliasFano, i: int) -> int:
    return ef[i]


def dd_encode(values) -> FrontBackDictionary:
    return FrontBackDictionary.encode(values)


def dd_access(dd: FrontBackDictionary, i: int) -> int:
    return dd[i]
