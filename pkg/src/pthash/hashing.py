"""Key digests, the pilot mixer and the skewed key-to-bucket mapping."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import xxhash

MASK64 = (1 << 64) - 1

# Version bytes stored in the serialized header; bump on any change to the
# functions below, since lookups depend on them bit for bit.
DIGEST_XXH3_128 = 1
MIXER_SPLITMIX = 1
MIXER_IDENTITY = 0xFF

_GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_PARTITION_SALT = 0x5D588B656C078965

KEY_SKEW = 0.6
BUCKET_SKEW = 0.3


class KeyHash(NamedTuple):
    bucket_hash: int
    position_hash: int


def hash_key(key: bytes, seed: int) -> KeyHash:
    digest = xxhash.xxh3_128_intdigest(key, seed & MASK64)
    return KeyHash(digest >> 64, digest & MASK64)


def hash_keys(keys: Iterable[bytes], seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Bulk version of :func:`hash_key`; returns (bucket_hashes, position_hashes)."""
    digest = xxhash.xxh3_128_digest
    s = seed & MASK64
    raw = b"".join([digest(k, s) for k in keys])
    # canonical digest is big-endian, high half first
    pairs = np.frombuffer(raw, dtype=">u8").reshape(-1, 2).astype(np.uint64)
    return np.ascontiguousarray(pairs[:, 0]), np.ascontiguousarray(pairs[:, 1])


def partition_hash(key: bytes, seed: int) -> int:
    """A 64-bit value, independent of the bucket/position halves, for partition choice."""
    return xxhash.xxh3_64_intdigest(key, mix64(seed ^ _PARTITION_SALT))


def partition_hashes(keys: Iterable[bytes], seed: int) -> np.ndarray:
    f = xxhash.xxh3_64_intdigest
    s = mix64(seed ^ _PARTITION_SALT)
    return np.fromiter((f(k, s) for k in keys), dtype=np.uint64)


def mix64(x: int) -> int:
    """splitmix64 finalizer. Bijective on 64-bit integers and mix64(0) != 0."""
    z = (x + _GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def mix64_array(x: np.ndarray) -> np.ndarray:
    z = x.astype(np.uint64) + np.uint64(_GOLDEN)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def hash_pilot(pilot: int, mixer: int = MIXER_SPLITMIX) -> int:
    if mixer == MIXER_IDENTITY:
        return pilot & MASK64
    if mixer != MIXER_SPLITMIX:
        raise ValueError(f"unknown pilot mixer {mixer}")
    return mix64(pilot)


def hash_pilots(pilots: np.ndarray, mixer: int = MIXER_SPLITMIX) -> np.ndarray:
    if mixer == MIXER_IDENTITY:
        return pilots.astype(np.uint64)
    if mixer != MIXER_SPLITMIX:
        raise ValueError(f"unknown pilot mixer {mixer}")
    return mix64_array(pilots)


def num_buckets(n: int, c: float) -> int:
    if n <= 1:
        return n
    return math.ceil(c * n / math.log2(n))


@dataclass(frozen=True)
class BucketMapper:
    """Skewed bucket assignment: ~60% of keys land in the first ~30% of buckets.

    ``m == 1`` is the degenerate single-bucket case (used for n == 1 and
    for tiny partitions); everything maps to bucket 0.
    """

    n: int
    m: int
    p1: int
    p2: int

    @classmethod
    def create(cls, n: int, m: int) -> "BucketMapper":
        if n < 1 or m < 1:
            raise ValueError(f"need n >= 1 and m >= 1, got n={n}, m={m}")
        if m == 1:
            return cls(n, 1, n, 1)
        p1 = math.ceil(KEY_SKEW * n)
        p2 = min(max(math.floor(BUCKET_SKEW * m), 1), m - 1)
        return cls(n, m, p1, p2)

    @classmethod
    def for_keys(cls, n: int, c: float) -> "BucketMapper":
        return cls.create(n, num_buckets(n, c))

    def bucket_of(self, bucket_hash: int) -> int:
        if self.m == 1:
            return 0
        if bucket_hash % self.n < self.p1:
            return bucket_hash % self.p2
        return self.p2 + bucket_hash % (self.m - self.p2)

    def buckets_of(self, bucket_hashes: np.ndarray) -> np.ndarray:
        h = bucket_hashes.astype(np.uint64, copy=False)
        if self.m == 1:
            return np.zeros(len(h), dtype=np.uint32)
        dense = (h % np.uint64(self.n)) < np.uint64(self.p1)
        out = np.where(
            dense,
            h % np.uint64(self.p2),
            np.uint64(self.p2) + h % np.uint64(self.m - self.p2),
        )
        return out.astype(np.uint32)


def bucket_of(bucket_hash: int, mapper: BucketMapper) -> int:
    return mapper.bucket_of(bucket_hash)


def identity_hasher(keys: Sequence[bytes], seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Test hasher: keys are little-endian integers used verbatim as bucket hashes.

    The position hash is the mixed integer, so distinct keys stay distinct.
    """
    vals = np.array([int.from_bytes(k, "little") for k in keys], dtype=np.uint64)
    return vals, mix64_array(vals ^ np.uint64(seed & MASK64))
