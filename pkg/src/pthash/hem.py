"""Partitioned construction: one independent function per key partition,
composed with partition offsets into a global minimal function.

The global bucket budget m = ceil(c n / log2 n) is split over the r
partitions (floor(m/r) each, the remainder going one-per-partition to the
first m mod r), so space matches the un-partitioned build.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from typing import Sequence

import numpy as np

from .build import BuildConfig, BuildStats, build
from .encoders import ENCODER_NAMES, ENCODER_TAGS
from .errors import BadMagic, BuildError, SerializationError, TruncatedStream, VersionMismatch
from .extmem import build_external
from .hashing import BucketMapper, mix64, num_buckets, partition_hash, partition_hashes
from .mphf import _HASH_VERSION_LOOKUP, FORMAT_VERSION, Mphf
from .search import search_space
from .serial import Reader, Writer

HEM_MAGIC = b"PTHHEM\x00\x00"
# magic, format version, hash version, encoder tag, then seed, n, m, r, alpha
HEM_HEADER_SIZE = len(HEM_MAGIC) + 3 + 5 * 8
DEFAULT_PARTITION_SIZE = 5_000_000


def partition_of(key: bytes, r: int, seed: int) -> int:
    return partition_hash(key, seed) % r


def partition_keys(keys: Sequence[bytes], r: int, seed: int) -> tuple[list[list[bytes]], np.ndarray]:
    if r < 1:
        raise ValueError(f"need at least one partition, got r={r}")
    parts = (partition_hashes(keys, seed) % np.uint64(r)).astype(np.int64)
    order = np.argsort(parts, kind="stable")
    counts = np.bincount(parts, minlength=r)
    bounds = np.r_[0, np.cumsum(counts)]
    streams = [[keys[i] for i in order[bounds[j]:bounds[j + 1]]] for j in range(r)]
    return streams, counts


def bucket_plan(m: int, r: int) -> list[int]:
    base, extra = divmod(m, r)
    return [base + (1 if j < extra else 0) for j in range(r)]


def partition_seed(seed: int, j: int) -> int:
    return mix64(seed ^ mix64(j + 1))


def partitions_for(n: int, avg_partition_size: int = DEFAULT_PARTITION_SIZE) -> int:
    return max(1, round(n / avg_partition_size))


class PartitionedMphf:
    stats = None

    """Each partition is stored bare (its seed, pilots and free array); sizes,
    bucket counts and mapping parameters are rebuilt from the global header
    and the offsets, so small partitions carry almost no fixed overhead.
    """

    def __init__(self, seed: int, n: int, m: int, offsets: np.ndarray, parts: list[Mphf],
                 alpha: float, encoder: str):
        self.seed = seed
        self.n = n
        self.m = m
        self.offsets = offsets
        self.parts = parts
        self.alpha = alpha
        self.encoder = encoder

    @property
    def r(self) -> int:
        return len(self.parts)

    @property
    def buckets(self) -> list[int]:
        return bucket_plan(self.m, self.r)

    def __len__(self) -> int:
        return self.n

    def __call__(self, key: bytes) -> int:
        return self.lookup(key)

    def lookup(self, key: bytes) -> int:
        if self.n == 0:
            raise ValueError("lookup on an empty function")
        j = partition_of(key, self.r, self.seed)
        part = self.parts[j]
        # an empty partition can still be hit by a foreign key
        local = part.lookup(key) if part.n else 0
        return int(self.offsets[j]) + local

    def lookup_many(self, keys: Sequence[bytes]) -> np.ndarray:
        out = np.empty(len(keys), dtype=np.uint64)
        if not len(keys):
            return out
        if self.n == 0:
            raise ValueError("lookup on an empty function")
        parts = (partition_hashes(keys, self.seed) % np.uint64(self.r)).astype(np.int64)
        for j in np.unique(parts):
            idx = np.flatnonzero(parts == j)
            part = self.parts[j]
            local = part.lookup_many([keys[i] for i in idx]) if part.n else 0
            out[idx] = np.uint64(self.offsets[j]) + local
        return out

    def write(self, out: Writer) -> None:
        out.raw(HEM_MAGIC)
        out.u8(FORMAT_VERSION)
        out.u8(self.parts[0].hash_version)
        out.u8(ENCODER_TAGS[self.encoder])
        for value in (self.seed, self.n, self.m, self.r):
            out.u64(value)
        out.f64(self.alpha)
        out.bitmap(self.offsets)
        for part in self.parts:
            out.u64(part.seed)
            part.write_payload(out)
            out.align()

    def to_bytes(self) -> bytes:
        out = Writer()
        self.write(out)
        return out.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "PartitionedMphf":
        src = Reader(data)
        head = bytes(src.data[:len(HEM_MAGIC)])
        if head != HEM_MAGIC:
            if len(head) < len(HEM_MAGIC) and HEM_MAGIC.startswith(head):
                raise TruncatedStream("stream ends inside the magic number")
            raise BadMagic(f"not a partitioned function (magic {head!r})")
        src.raw(len(HEM_MAGIC))
        if (v := src.u8()) != FORMAT_VERSION:
            raise VersionMismatch(f"format version {v}, expected {FORMAT_VERSION}")
        hash_version = src.u8()
        if hash_version not in _HASH_VERSION_LOOKUP:
            raise VersionMismatch(f"unknown digest/mixer version {hash_version:#x}")
        mixer = _HASH_VERSION_LOOKUP[hash_version][1]
        tag = src.u8()
        if tag not in ENCODER_NAMES:
            raise SerializationError(f"unknown pilot encoder tag {tag}")
        encoder = ENCODER_NAMES[tag]
        seed, n, m, r = (src.u64() for _ in range(4))
        alpha = src.f64()
        if not 0 < alpha <= 1 or r < 1 or (n and r > m):
            raise SerializationError("partitioned header out of range")
        offsets = src.bitmap(r + 1)
        sizes = np.diff(offsets.astype(np.int64))
        if offsets[0] != 0 or int(offsets[-1]) != n or (sizes < 0).any():
            raise SerializationError("partition offsets disagree with header")
        parts = []
        for n_j, m_j in zip(sizes.tolist(), bucket_plan(m, r)):
            part_seed = src.u64()
            mapper = BucketMapper.create(n_j, m_j) if n_j else None
            parts.append(Mphf.read_payload(
                src, seed=part_seed, n=n_j, n_prime=search_space(n_j, alpha),
                m=m_j if n_j else 0, p1=mapper.p1 if mapper else 0,
                p2=mapper.p2 if mapper else 0, encoder=encoder, mixer=mixer))
            src.align()
        if not src.at_end():
            raise SerializationError("trailing bytes after partitioned function")
        return cls(seed, n, m, offsets, parts, alpha, encoder)

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    def space_bits_per_key(self) -> float:
        if self.n == 0:
            raise ValueError("space per key is undefined for an empty function")
        return (len(self.to_bytes()) - HEM_HEADER_SIZE) * 8 / self.n


def build_partitioned(keys: Sequence[bytes], config: BuildConfig = BuildConfig(), r: int = 1,
                      *, ram_budget: int | None = None, tmp_dir=None) -> PartitionedMphf:
    """Build r independent functions with exactly m buckets in total.

    Partitions are distributed over ``config.workers`` workers; each
    partition is built by a single worker. With ``ram_budget`` set, every
    partition goes through the external-memory builder with that budget.
    """
    t0 = time.perf_counter()
    n = len(keys)
    m = num_buckets(n, config.c)
    if n and r > m:
        raise ValueError(f"{r} partitions exceed the {m} available buckets")
    streams, counts = partition_keys(keys, r, config.seed)
    plan = bucket_plan(m, r)
    offsets = np.zeros(r + 1, dtype=np.uint64)
    np.cumsum(counts, out=offsets[1:])

    def one(j: int) -> Mphf:
        cfg = replace(config, seed=partition_seed(config.seed, j), buckets=plan[j], workers=1)
        try:
            if ram_budget is not None:
                return build_external(streams[j], cfg, ram_budget, tmp_dir)
            return build(streams[j], cfg)
        except BuildError as exc:
            raise BuildError(f"partition {j}: {exc}", exc.attempts) from exc

    if config.workers > 1 and r > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            parts = list(pool.map(one, range(r)))
    else:
        parts = [one(j) for j in range(r)]
    out = PartitionedMphf(config.seed, n, m, offsets, parts, config.alpha, config.encoder)
    out.stats = BuildStats(
        seed=config.seed,
        attempts=sum(p.stats.attempts for p in parts if p.stats),
        seconds=time.perf_counter() - t0,
        retries=max((p.stats.retries for p in parts if p.stats), default=0),
    )
    return out


def lookup_partitioned(f: PartitionedMphf, key: bytes) -> int:
    return f.lookup(key)


def load(path):
    """Load either a flat or a partitioned function file."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:len(HEM_MAGIC)] == HEM_MAGIC:
        return PartitionedMphf.from_bytes(data)
    return Mphf.from_bytes(data)
