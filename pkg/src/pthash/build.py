"""In-memory construction: map keys to sorted pair blocks, merge them into
size-ordered buckets, search pilots, then derive the free array."""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numba as nb
import numpy as np

from .encoders import ENCODER_TAGS
from .errors import BuildError, DuplicateHashError, PilotSearchExhausted
from .hashing import (
    MIXER_IDENTITY,
    MIXER_SPLITMIX,
    BucketMapper,
    hash_keys,
    mix64,
    num_buckets,
)
from .search import (
    DEFAULT_SEARCH_LIMIT,
    SearchResult,
    TakenBitmap,
    search_parallel,
    search_space,
)

log = logging.getLogger(__name__)

LOG2_E = math.log2(math.e)

# One externalized <id, hash> pair: 4-byte bucket id + 8-byte hash, little-endian.
PAIR_DTYPE = np.dtype([("id", "<u4"), ("hash", "<u8")])
PAIR_BYTES = PAIR_DTYPE.itemsize

Hasher = Callable[[Sequence[bytes], int], "tuple[np.ndarray, np.ndarray]"]


@dataclass(frozen=True)
class BuildConfig:
    c: float = 7.0
    alpha: float = 0.94
    seed: int = 1
    workers: int = 1
    encoder: str = "dd"
    search_limit: int = DEFAULT_SEARCH_LIMIT
    retries: int = 3
    mixer: int = MIXER_SPLITMIX
    # Forces the bucket count instead of ceil(c n / log2 n); used by partitioned builds.
    buckets: int | None = None

    def __post_init__(self):
        if not self.c > LOG2_E:
            raise ValueError(f"c must exceed log2(e) ~ {LOG2_E:.4f}, got {self.c}")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        if self.encoder not in ENCODER_TAGS:
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.retries < 0 or self.search_limit < 1:
            raise ValueError("retries must be >= 0 and search_limit >= 1")
        if self.mixer not in (MIXER_SPLITMIX, MIXER_IDENTITY):
            raise ValueError(f"unknown pilot mixer {self.mixer}")

    def mapper(self, n: int) -> BucketMapper:
        m = self.buckets if self.buckets is not None else num_buckets(n, self.c)
        return BucketMapper.create(n, m)


@dataclass
class PairBlock:
    """<bucket id, position hash> pairs sorted by (id, hash)."""

    ids: np.ndarray
    hashes: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def sorted_from(cls, ids: np.ndarray, hashes: np.ndarray) -> "PairBlock":
        order = np.lexsort((hashes, ids))
        return cls(ids[order].astype(np.uint32), hashes[order].astype(np.uint64))

    @classmethod
    def from_records(cls, records: np.ndarray) -> "PairBlock":
        return cls(records["id"].astype(np.uint32), records["hash"].astype(np.uint64))

    def to_records(self) -> np.ndarray:
        out = np.empty(len(self), dtype=PAIR_DTYPE)
        out["id"] = self.ids
        out["hash"] = self.hashes
        return out

    def to_bytes(self) -> bytes:
        return self.to_records().tobytes()


class BucketCollection:
    """Non-empty buckets in search order: falling size, then ascending id.

    Buckets of the same size are contiguous, so the slice for size k is the
    k-th buffer: ``buffer(k)`` returns its ids and a (count, k) hash matrix.
    """

    def __init__(self, ids: np.ndarray, offsets: np.ndarray, hashes: np.ndarray, num_buckets: int):
        self.ids = ids
        self.offsets = offsets
        self.hashes = hashes
        self.num_buckets = num_buckets

    @classmethod
    def from_buffers(cls, buffers: dict[int, tuple[np.ndarray, np.ndarray]], num_buckets: int
                     ) -> "BucketCollection":
        ids, hashes, sizes = [], [], []
        for k in sorted(buffers, reverse=True):
            bids, bh = buffers[k]
            ids.append(np.asarray(bids, dtype=np.int64))
            hashes.append(np.asarray(bh, dtype=np.uint64).reshape(-1))
            sizes.append(np.full(len(bids), k, dtype=np.int64))
        if not ids:
            return cls.empty(num_buckets)
        size_arr = np.concatenate(sizes)
        offsets = np.zeros(len(size_arr) + 1, dtype=np.int64)
        np.cumsum(size_arr, out=offsets[1:])
        return cls(np.concatenate(ids), offsets, np.concatenate(hashes), num_buckets)

    @classmethod
    def empty(cls, num_buckets: int) -> "BucketCollection":
        return cls(np.zeros(0, np.int64), np.zeros(1, np.int64), np.zeros(0, np.uint64), num_buckets)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def max_size(self) -> int:
        return int(self.sizes[0]) if len(self) else 0

    @property
    def num_keys(self) -> int:
        return int(self.offsets[-1])

    def buffer(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        sizes = self.sizes
        # sizes are non-increasing; locate the run equal to k
        lo = int(np.searchsorted(-sizes, -k, side="left"))
        hi = int(np.searchsorted(-sizes, -k, side="right"))
        hashes = self.hashes[self.offsets[lo]:self.offsets[hi]].reshape(hi - lo, k)
        return self.ids[lo:hi], hashes

    def __iter__(self):
        for r in range(len(self)):
            yield int(self.ids[r]), self.hashes[self.offsets[r]:self.offsets[r + 1]]

    def slice(self, lo: int, hi: int) -> "BucketCollection":
        off = self.offsets[lo:hi + 1]
        return BucketCollection(self.ids[lo:hi], off - off[0], self.hashes[off[0]:off[-1]],
                                self.num_buckets)


# -- map ------------------------------------------------------------------------


def map_keys(
    keys: Sequence[bytes],
    config: BuildConfig,
    *,
    mapper: BucketMapper | None = None,
    hasher: Hasher | None = None,
    seed: int | None = None,
) -> list[PairBlock]:
    """Hash keys into K = config.workers blocks of sorted <bucket id, hash> pairs."""
    n = len(keys)
    seed = config.seed if seed is None else seed
    if mapper is None:
        mapper = config.mapper(n)
    hasher = hasher or hash_keys
    K = config.workers
    bounds = [n * i // K for i in range(K + 1)]

    def one(i: int) -> PairBlock:
        part = keys[bounds[i]:bounds[i + 1]]
        bucket_h, pos_h = hasher(part, seed)
        return PairBlock.sorted_from(mapper.buckets_of(bucket_h), pos_h)

    if K == 1:
        return [one(0)]
    with ThreadPoolExecutor(K) as pool:
        return list(pool.map(one, range(K)))


# -- merge ----------------------------------------------------------------------


@nb.njit(cache=True, nogil=True, inline="always")
def _less(ids, hashes, a, b):
    return ids[a] < ids[b] or (ids[a] == ids[b] and hashes[a] < hashes[b])


@nb.njit(cache=True, nogil=True)
def _kway_merge(ids, hashes, starts, ends, out_ids, out_hashes):
    """Merge sorted runs [starts[i], ends[i]) with a binary min-heap of cursors.

    Returns -1, or the output index at which an (id, hash) duplicate appeared.
    """
    k = starts.shape[0]
    cur = starts.copy()
    heap = np.empty(k, dtype=np.int64)  # run indices, ordered by their head pair
    size = 0
    for r in range(k):
        if cur[r] < ends[r]:
            heap[size] = r
            size += 1
            j = size - 1
            while j > 0:
                parent = (j - 1) // 2
                if _less(ids, hashes, cur[heap[j]], cur[heap[parent]]):
                    heap[j], heap[parent] = heap[parent], heap[j]
                    j = parent
                else:
                    break
    o = 0
    while size > 0:
        r = heap[0]
        src = cur[r]
        out_ids[o] = ids[src]
        out_hashes[o] = hashes[src]
        if o > 0 and out_ids[o] == out_ids[o - 1] and out_hashes[o] == out_hashes[o - 1]:
            return o
        o += 1
        cur[r] += 1
        if cur[r] == ends[r]:
            size -= 1
            heap[0] = heap[size]
        j = 0
        while True:
            left = 2 * j + 1
            if left >= size:
                break
            best = left
            if left + 1 < size and _less(ids, hashes, cur[heap[left + 1]], cur[heap[left]]):
                best = left + 1
            if _less(ids, hashes, cur[heap[best]], cur[heap[j]]):
                heap[j], heap[best] = heap[best], heap[j]
                j = best
            else:
                break
    return -1


def group_buckets(ids: np.ndarray, hashes: np.ndarray, num_buckets: int) -> BucketCollection:
    """Group a merged, sorted pair stream into per-size buffers."""
    if len(ids) == 0:
        return BucketCollection.empty(num_buckets)
    starts = np.flatnonzero(np.r_[True, ids[1:] != ids[:-1]])
    sizes = np.diff(np.r_[starts, len(ids)])
    buffers = {}
    for k in np.unique(sizes):
        sel = starts[sizes == k]
        rows = sel[:, None] + np.arange(k)
        buffers[int(k)] = (ids[sel].astype(np.int64), hashes[rows])
    return BucketCollection.from_buffers(buffers, num_buckets)


def merge_pairs(ids: np.ndarray, hashes: np.ndarray, bounds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """k-way merge of concatenated sorted runs delimited by ``bounds``."""
    out_ids = np.empty(len(ids), dtype=np.uint32)
    out_hashes = np.empty(len(hashes), dtype=np.uint64)
    dup = _kway_merge(
        np.ascontiguousarray(ids, dtype=np.uint32),
        np.ascontiguousarray(hashes, dtype=np.uint64),
        np.ascontiguousarray(bounds[:-1], dtype=np.int64),
        np.ascontiguousarray(bounds[1:], dtype=np.int64),
        out_ids,
        out_hashes,
    )
    if dup >= 0:
        raise DuplicateHashError(int(out_ids[dup]), int(out_hashes[dup]))
    return out_ids, out_hashes


def merge_blocks(blocks: Sequence[PairBlock], num_buckets: int | None = None) -> BucketCollection:
    if num_buckets is None:
        num_buckets = max((int(b.ids[-1]) + 1 for b in blocks if len(b)), default=0)
    sizes = [len(b) for b in blocks]
    bounds = np.zeros(len(blocks) + 1, dtype=np.int64)
    np.cumsum(sizes, out=bounds[1:])
    ids = np.concatenate([b.ids for b in blocks]) if blocks else np.zeros(0, np.uint32)
    hashes = np.concatenate([b.hashes for b in blocks]) if blocks else np.zeros(0, np.uint64)
    merged_ids, merged_hashes = merge_pairs(ids, hashes, bounds)
    return group_buckets(merged_ids, merged_hashes, num_buckets)


# -- free array -----------------------------------------------------------------


def build_free_array(taken: TakenBitmap, n: int, n_prime: int | None = None) -> np.ndarray:
    """Slot p >= n maps to free[p - n]: the i-th hit overflow slot gets the i-th hole below n.

    Overflow slots no key lands on repeat the previous value so the array
    stays non-decreasing (Elias-Fano friendly); they are never read.
    """
    n_prime = taken.n_prime if n_prime is None else n_prime
    bits = taken.to_bool()
    holes = np.flatnonzero(~bits[:n])
    hits = np.flatnonzero(bits[n:n_prime])
    if len(holes) != len(hits):
        raise ValueError(f"bitmap has {n - len(holes) + len(hits)} bits set, expected {n}")
    free = np.zeros(n_prime - n, dtype=np.uint64)
    free[hits] = holes
    np.maximum.accumulate(free, out=free)
    return free


# -- orchestration --------------------------------------------------------------


@dataclass
class BuildStats:
    seed: int = 0
    attempts: int = 0
    seconds: float = 0.0
    retries: int = 0
    phases: dict = field(default_factory=dict)


def seed_for_attempt(seed: int, attempt: int) -> int:
    return seed if attempt == 0 else mix64(seed ^ mix64(attempt))


def build(keys: Sequence[bytes], config: BuildConfig = BuildConfig(), *, hasher: Hasher | None = None):
    """Build a minimal perfect hash function over distinct byte-string keys.

    Retries with a derived seed on duplicate hashes or an exhausted pilot
    search, up to ``config.retries`` times, then raises :class:`BuildError`.
    """
    from .mphf import Mphf

    failures: list[BaseException] = []
    t0 = time.perf_counter()
    for attempt in range(config.retries + 1):
        seed = seed_for_attempt(config.seed, attempt)
        try:
            pilots, taken, mapper, stats = build_pilots(keys, replace(config, seed=seed), hasher=hasher)
        except (DuplicateHashError, PilotSearchExhausted) as exc:
            log.info("build attempt %d with seed %#x failed: %s", attempt, seed, exc)
            failures.append(exc)
            continue
        mphf = Mphf.assemble(config, seed, mapper, pilots, taken)
        stats.retries = attempt
        stats.seconds = time.perf_counter() - t0
        mphf.stats = stats
        return mphf
    raise BuildError(
        f"construction failed after {len(failures)} attempts; last error: {failures[-1]}",
        failures,
    )


def build_pilots(keys: Sequence[bytes], config: BuildConfig, *, hasher: Hasher | None = None):
    """One construction attempt with ``config.seed``: map, merge, search."""
    n = len(keys)
    stats = BuildStats(seed=config.seed)
    if n == 0:
        return np.zeros(0, np.uint64), TakenBitmap(0), None, stats
    mapper = config.mapper(n)
    t = time.perf_counter()
    blocks = map_keys(keys, config, mapper=mapper, hasher=hasher)
    stats.phases["map"] = time.perf_counter() - t
    t = time.perf_counter()
    buckets = merge_blocks(blocks, mapper.m)
    del blocks
    stats.phases["merge"] = time.perf_counter() - t
    t = time.perf_counter()
    result: SearchResult = search_parallel(
        buckets, n, workers=config.workers, limit=config.search_limit,
        n_prime=search_space(n, config.alpha), mixer=config.mixer,
    )
    stats.phases["search"] = time.perf_counter() - t
    stats.attempts = result.attempts
    return result.pilots, result.taken, mapper, stats
