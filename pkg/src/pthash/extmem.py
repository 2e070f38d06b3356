"""Disk-backed construction under an internal-memory budget of M bytes.

The steps are the in-memory ones with their outputs spilled to disk:

* map: fill a buffer of M/q pairs, sort it in place, flush it as a sorted run;
* merge: stream a k-way merge of the runs into per-size bucket buffers that
  are appended to one file per bucket size whenever they reach their share
  of the budget;
* search: stream buckets largest-size-first from the bucket files with the
  taken bitmap in memory, spilling <id, pilot> pairs sorted by id whenever
  the pilot buffer (M' = M - n'/8 bytes) fills; a final merge by id writes
  the dense pilots table.

All records are little-endian: 4-byte bucket id followed by 8-byte payload
(a position hash or a pilot). Bucket files hold (4-byte id, k x 8-byte
hashes) records for buckets of size k.
"""
from __future__ import annotations

import logging
import math
import os
import shutil
import tempfile
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numba as nb
import numpy as np

from .build import (
    PAIR_BYTES,
    PAIR_DTYPE,
    BucketCollection,
    BuildConfig,
    BuildStats,
    Hasher,
    group_buckets,
    seed_for_attempt,
)
from .errors import BudgetExceeded, BuildError, DuplicateHashError, PilotSearchExhausted
from .hashing import BucketMapper, hash_keys
from .search import TakenBitmap, search_parallel, search_space

log = logging.getLogger(__name__)

PILOT_DTYPE = np.dtype([("id", "<u4"), ("pilot", "<u8")])
PAIR_RECORD = PAIR_BYTES  # q

# Transient scratch outside the main buffers: hashing batches, bucket-file
# read chunks, heap state. Peak usage stays within M + this + per-file overhead.
SCRATCH_BYTES = 64 * 1024
# Bookkeeping per live spill file (path, record count, open handle, merge cursor).
FILE_OVERHEAD_BYTES = 1024
HASH_BATCH = 256
READ_CHUNK_BYTES = 8 * 1024
MAX_IO_BYTES = 1 << 20


class SpillIOError(OSError):
    pass


@dataclass
class MemoryBudget:
    """``ram`` = M bytes; ``q`` bytes per externalized pair."""

    ram: int
    q: int = PAIR_RECORD

    def __post_init__(self):
        if self.ram < 4 * self.q:
            raise ValueError(f"memory budget of {self.ram} bytes is too small")

    @property
    def pair_capacity(self) -> int:
        return self.ram // self.q

    def bitmap_bytes(self, n_prime: int) -> int:
        return math.ceil(n_prime / 8)

    def search_bytes(self, n_prime: int) -> int:
        """M' = M - ceil(n'/8): what is left for pilots once the bitmap is resident."""
        return self.ram - self.bitmap_bytes(n_prime)

    def check_search(self, n_prime: int) -> None:
        if self.search_bytes(n_prime) < 2 * self.q:
            raise BudgetExceeded(
                f"taken bitmap needs {self.bitmap_bytes(n_prime)} bytes, budget is {self.ram}"
            )

    def slack(self, files: int) -> int:
        """Allowed tracked allocation above M with ``files`` spill files in play."""
        return SCRATCH_BYTES + FILE_OVERHEAD_BYTES * files

    def map_files(self, n: int) -> int:
        return -(-self.q * n // (self.pair_capacity * self.q)) if n else 0


@dataclass
class SpillFile:
    path: Path
    kind: str  # "pairs" or "pilots"
    count: int

    def read(self) -> np.ndarray:
        dtype = PAIR_DTYPE if self.kind == "pairs" else PILOT_DTYPE
        return np.fromfile(self.path, dtype=dtype)


def _read_into(handle, buf: np.ndarray, path) -> np.ndarray:
    """Fill ``buf`` from the file position; np.fromfile on file objects leaks per call."""
    view = memoryview(buf).cast("B")
    got = 0
    while got < len(view):
        step = handle.readinto(view[got:])
        if not step:
            raise SpillIOError(0, f"{path}: short read ({got} of {len(view)} bytes)")
        got += step
    return buf


def _write(path: Path, data, mode: str = "ab") -> None:
    try:
        with open(path, mode) as f:
            f.write(memoryview(data).cast("B") if not isinstance(data, bytes) else data)
    except OSError as exc:
        raise SpillIOError(exc.errno, f"writing {path}: {exc.strerror or exc}") from exc


# -- in-place sort of (id, payload) records -------------------------------------


@nb.njit(cache=True, nogil=True, inline="always")
def _rec_less(ids, vals, a, b):
    return ids[a] < ids[b] or (ids[a] == ids[b] and vals[a] < vals[b])


@nb.njit(cache=True, nogil=True)
def _sift(ids, vals, root, end):
    while True:
        child = 2 * root + 1
        if child >= end:
            return
        if child + 1 < end and _rec_less(ids, vals, child, child + 1):
            child += 1
        if _rec_less(ids, vals, root, child):
            ids[root], ids[child] = ids[child], ids[root]
            vals[root], vals[child] = vals[child], vals[root]
            root = child
        else:
            return


@nb.njit(cache=True, nogil=True)
def sort_records(ids, vals):
    """Heapsort by (id, value) without auxiliary memory."""
    n = ids.shape[0]
    for start in range(n // 2 - 1, -1, -1):
        _sift(ids, vals, start, n)
    for end in range(n - 1, 0, -1):
        ids[0], ids[end] = ids[end], ids[0]
        vals[0], vals[end] = vals[end], vals[0]
        _sift(ids, vals, 0, end)


# -- streaming k-way merge -------------------------------------------------------

_DONE, _REFILL, _OUT_FULL, _DUPLICATE = 0, 1, 2, 3


@nb.njit(cache=True, nogil=True)
def _merge_step(ids, vals, lengths, cursors, more, out_ids, out_vals, state, check_dups):
    """Advance a k-way merge over per-run chunks ids[r, :lengths[r]].

    Stops when the output fills, when a run with more data on disk drains
    its chunk (returns the run to refill), or when everything is merged.
    ``state`` = [has_last, last_id, last_val] carries duplicate detection
    across calls. Returns (status, run, produced).
    """
    k = lengths.shape[0]
    heap = np.empty(k, dtype=np.int64)
    size = 0
    for r in range(k):
        if cursors[r] < lengths[r]:
            heap[size] = r
            size += 1
            j = size - 1
            while j > 0:
                parent = (j - 1) // 2
                a = heap[j]
                b = heap[parent]
                if ids[a, cursors[a]] < ids[b, cursors[b]] or (
                    ids[a, cursors[a]] == ids[b, cursors[b]] and vals[a, cursors[a]] < vals[b, cursors[b]]
                ):
                    heap[j], heap[parent] = heap[parent], heap[j]
                    j = parent
                else:
                    break
        elif more[r]:
            return _REFILL, r, 0
    o = 0
    cap = out_ids.shape[0]
    while size > 0:
        if o == cap:
            return _OUT_FULL, -1, o
        r = heap[0]
        c = cursors[r]
        i = ids[r, c]
        v = vals[r, c]
        if check_dups and state[0] == 1 and np.uint64(i) == state[1] and v == state[2]:
            return _DUPLICATE, r, o
        state[0] = 1
        state[1] = np.uint64(i)
        state[2] = v
        out_ids[o] = i
        out_vals[o] = v
        o += 1
        cursors[r] = c + 1
        if cursors[r] == lengths[r]:
            if more[r]:
                return _REFILL, r, o
            size -= 1
            heap[0] = heap[size]
        j = 0
        while True:
            left = 2 * j + 1
            if left >= size:
                break
            best = left
            if left + 1 < size:
                a = heap[left + 1]
                b = heap[left]
                if ids[a, cursors[a]] < ids[b, cursors[b]] or (
                    ids[a, cursors[a]] == ids[b, cursors[b]] and vals[a, cursors[a]] < vals[b, cursors[b]]
                ):
                    best = left + 1
            a = heap[best]
            b = heap[j]
            if ids[a, cursors[a]] < ids[b, cursors[b]] or (
                ids[a, cursors[a]] == ids[b, cursors[b]] and vals[a, cursors[a]] < vals[b, cursors[b]]
            ):
                heap[j], heap[best] = heap[best], heap[j]
                j = best
            else:
                break
    return _DONE, -1, o


def stream_merge(
    files: Sequence[SpillFile],
    chunk_records: int,
    out_records: int,
    *,
    check_duplicates: bool = True,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield the merged (id, payload) stream of sorted spill files in pieces."""
    k = len(files)
    if k == 0:
        return
    rec_dtype = PAIR_DTYPE if files[0].kind == "pairs" else PILOT_DTYPE
    val_field = rec_dtype.names[1]
    chunk_records = max(1, chunk_records)
    ids = np.zeros((k, chunk_records), dtype=np.uint32)
    vals = np.zeros((k, chunk_records), dtype=np.uint64)
    lengths = np.zeros(k, dtype=np.int64)
    cursors = np.zeros(k, dtype=np.int64)
    more = np.ones(k, dtype=np.bool_)
    remaining = [f.count for f in files]
    handles = [open(f.path, "rb", buffering=0) for f in files]
    out_ids = np.empty(max(1, out_records), dtype=np.uint32)
    out_vals = np.empty(max(1, out_records), dtype=np.uint64)
    state = np.zeros(3, dtype=np.uint64)
    staging = np.empty(chunk_records, dtype=rec_dtype)

    def refill(r: int) -> None:
        take = min(chunk_records, remaining[r])
        recs = _read_into(handles[r], staging[:take], files[r].path)
        ids[r, :take] = recs["id"]
        vals[r, :take] = recs[val_field]
        lengths[r] = take
        cursors[r] = 0
        remaining[r] -= take
        more[r] = remaining[r] > 0

    try:
        for r in range(k):
            refill(r)
        while True:
            status, run, produced = _merge_step(
                ids, vals, lengths, cursors, more, out_ids, out_vals, state, check_duplicates
            )
            if produced:
                yield out_ids[:produced].copy(), out_vals[:produced].copy()
            if status == _DONE:
                return
            if status == _DUPLICATE:
                raise DuplicateHashError(int(ids[run, cursors[run]]), int(vals[run, cursors[run]]))
            if status == _REFILL:
                refill(run)
    finally:
        for h in handles:
            h.close()


# -- map ---------------------------------------------------------------------------


def map_external(
    keys: Iterable[bytes],
    n: int,
    config: BuildConfig,
    budget: MemoryBudget,
    workdir: Path,
    *,
    mapper: BucketMapper | None = None,
    hasher: Hasher | None = None,
) -> list[SpillFile]:
    """Hash keys into a buffer of M/q pairs; each full buffer is sorted and flushed."""
    mapper = mapper or config.mapper(n)
    hasher = hasher or hash_keys
    buf = np.empty(min(budget.pair_capacity, max(n, 1)), dtype=PAIR_DTYPE)
    ids, hashes = buf["id"], buf["hash"]
    files: list[SpillFile] = []
    fill = 0
    seen = 0

    def flush() -> None:
        nonlocal fill
        sort_records(ids[:fill], hashes[:fill])
        path = workdir / f"map-{config.seed:016x}-{len(files):05d}.bin"
        _write(path, buf[:fill], "wb")
        files.append(SpillFile(path, "pairs", fill))
        fill = 0

    batch: list[bytes] = []

    def consume(batch: list[bytes]) -> None:
        nonlocal fill
        bucket_h, pos_h = hasher(batch, config.seed)
        bucket_ids = mapper.buckets_of(bucket_h)
        i = 0
        while i < len(batch):
            take = min(len(batch) - i, len(buf) - fill)
            ids[fill:fill + take] = bucket_ids[i:i + take]
            hashes[fill:fill + take] = pos_h[i:i + take]
            fill += take
            i += take
            if fill == len(buf):
                flush()

    for key in keys:
        batch.append(key)
        if len(batch) == HASH_BATCH:
            consume(batch)
            seen += len(batch)
            batch = []
    if batch:
        consume(batch)
        seen += len(batch)
    if seen != n:
        raise ValueError(f"expected {n} keys, the key source produced {seen}")
    if fill:
        flush()
    return files


# -- merge -------------------------------------------------------------------------


@dataclass
class BucketFiles:
    """One file per bucket size; ``counts[k]`` buckets of size k in ascending id order."""

    paths: dict[int, Path]
    counts: dict[int, int]
    num_buckets: int
    flushes: int = 0

    @property
    def max_size(self) -> int:
        return max(self.paths, default=0)

    def record_dtype(self, k: int) -> np.dtype:
        return np.dtype([("id", "<u4"), ("hashes", "<u8", (k,))])

    def iter_chunks(self, chunk_bytes: int) -> Iterator[BucketCollection]:
        """Buckets in search order (size L down to 1, ascending id), chunked."""
        for k in sorted(self.paths, reverse=True):
            dtype = self.record_dtype(k)
            per_chunk = max(1, chunk_bytes // dtype.itemsize)
            left = self.counts[k]
            staging = np.empty(min(per_chunk, left), dtype=dtype)
            with open(self.paths[k], "rb", buffering=0) as f:
                while left:
                    recs = _read_into(f, staging[:min(per_chunk, left)], self.paths[k])
                    left -= len(recs)
                    offsets = np.arange(len(recs) + 1, dtype=np.int64) * k
                    yield BucketCollection(
                        recs["id"].astype(np.int64),
                        offsets,
                        recs["hashes"].reshape(-1).astype(np.uint64),
                        self.num_buckets,
                    )

    def read_all(self) -> BucketCollection:
        buffers = {}
        for k in self.paths:
            recs = np.fromfile(self.paths[k], dtype=self.record_dtype(k))
            buffers[k] = (recs["id"].astype(np.int64), recs["hashes"].reshape(len(recs), k))
        return BucketCollection.from_buffers(buffers, self.num_buckets)


def merge_external(
    files: Sequence[SpillFile],
    budget: MemoryBudget,
    num_buckets: int,
    workdir: Path,
    *,
    tag: str = "",
) -> BucketFiles:
    """k-way merge of sorted pair runs into per-size bucket files.

    Half of M feeds the merge (input chunks and output piece), half holds
    the per-size bucket buffers; all buffers are appended to their files
    whenever they reach that half.
    """
    k = max(len(files), 1)
    merge_bytes = budget.ram // 2
    # k input chunks plus the staging chunk they are read through
    chunk_records = max(1, min(merge_bytes // 2 // ((k + 1) * PAIR_RECORD), MAX_IO_BYTES // PAIR_RECORD))
    # grouping a merged piece makes a handful of copies of it
    out_records = max(1, min(merge_bytes // 2 // (8 * PAIR_RECORD), MAX_IO_BYTES // PAIR_RECORD))
    # a piece adds at most q bytes per hash to the buffers; flush before it could overflow
    buffer_limit = max(PAIR_RECORD, budget.ram - merge_bytes - out_records * PAIR_RECORD)

    result = BucketFiles({}, {}, num_buckets)
    pending: dict[int, list[bytes]] = {}
    buffered = 0

    def flush_buffers() -> None:
        nonlocal buffered
        for size, parts in pending.items():
            path = result.paths.setdefault(size, workdir / f"buckets-{tag}{size:03d}.bin")
            for part in parts:
                _write(path, part)
        pending.clear()
        buffered = 0
        result.flushes += 1

    def append(group: BucketCollection) -> None:
        nonlocal buffered
        sizes = group.sizes
        for size in np.unique(sizes):
            size = int(size)
            bids, bh = group.buffer(size)
            recs = np.empty(len(bids), dtype=result.record_dtype(size))
            recs["id"] = bids
            recs["hashes"] = bh
            data = recs.tobytes()
            pending.setdefault(size, []).append(data)
            result.counts[size] = result.counts.get(size, 0) + len(bids)
            buffered += len(data)
        if buffered >= buffer_limit:
            flush_buffers()

    carry_ids = np.zeros(0, np.uint32)
    carry_vals = np.zeros(0, np.uint64)
    for piece_ids, piece_vals in stream_merge(files, chunk_records, out_records):
        ids = np.concatenate([carry_ids, piece_ids])
        vals = np.concatenate([carry_vals, piece_vals])
        # the last bucket may continue in the next piece
        cut = int(np.searchsorted(ids, ids[-1], side="left"))
        if cut:
            append(group_buckets(ids[:cut], vals[:cut], num_buckets))
        carry_ids, carry_vals = ids[cut:], vals[cut:]
    if len(carry_ids):
        append(group_buckets(carry_ids, carry_vals, num_buckets))
    if pending:
        flush_buffers()
    return result


# -- search ------------------------------------------------------------------------


@dataclass
class ExternalSearch:
    pilots_path: Path
    taken: TakenBitmap
    attempts: int
    pilot_files: int


def _search_and_spill(bucket_files, n, n_prime, config, budget, workdir, taken):
    """Search every bucket, spilling <id, pilot> runs sorted by id from an M'/q-pair buffer."""
    capacity = max(1, budget.search_bytes(n_prime) // PAIR_RECORD)
    buf = np.empty(min(capacity, max(sum(bucket_files.counts.values()), 1)), dtype=PILOT_DTYPE)
    ids, pilots_out = buf["id"], buf["pilot"]
    spills: list[SpillFile] = []
    fill = 0
    attempts = 0
    for chunk in bucket_files.iter_chunks(READ_CHUNK_BYTES):
        local = BucketCollection(np.arange(len(chunk), dtype=np.int64), chunk.offsets,
                                 chunk.hashes, len(chunk))
        found = search_parallel(local, n, workers=config.workers, limit=config.search_limit,
                                n_prime=n_prime, mixer=config.mixer, taken=taken)
        attempts += found.attempts
        i = 0
        while i < len(chunk):
            take = min(len(chunk) - i, len(buf) - fill)
            ids[fill:fill + take] = chunk.ids[i:i + take]
            pilots_out[fill:fill + take] = found.pilots[i:i + take]
            fill += take
            i += take
            if fill == len(buf):
                spills.append(_spill_pilots(buf, fill, config.seed, len(spills), workdir))
                fill = 0
    if fill:
        spills.append(_spill_pilots(buf, fill, config.seed, len(spills), workdir))
    return spills, attempts


def _spill_pilots(buf, fill, seed, ordinal, workdir) -> SpillFile:
    sort_records(buf["id"][:fill], buf["pilot"][:fill])
    path = workdir / f"pilots-{seed:016x}-{ordinal:05d}.bin"
    _write(path, buf[:fill], "wb")
    return SpillFile(path, "pilots", fill)


def search_external(
    bucket_files: BucketFiles,
    n: int,
    config: BuildConfig,
    budget: MemoryBudget,
    workdir: Path,
) -> ExternalSearch:
    """Search pilots from bucket files; returns the path of the dense pilots table."""
    n_prime = search_space(n, config.alpha)
    budget.check_search(n_prime)
    taken = TakenBitmap(n_prime)
    spills, attempts = _search_and_spill(bucket_files, n, n_prime, config, budget, workdir, taken)

    # merge the sorted runs by id into the dense table; empty buckets get pilot 0
    dense = workdir / f"pilots-{config.seed:016x}-dense.bin"
    _write(dense, b"", "wb")
    m = bucket_files.num_buckets
    next_id = 0
    segment = 4096
    per_file = budget.search_bytes(n_prime) // 4 // ((len(spills) + 1) * PAIR_RECORD)
    per_file = max(1, min(per_file, MAX_IO_BYTES // PAIR_RECORD))
    for ids, vals in stream_merge(spills, per_file, segment, check_duplicates=False):
        end = int(ids[-1]) + 1
        for lo in range(next_id, end, segment):
            hi = min(lo + segment, end)
            out = np.zeros(hi - lo, dtype="<u8")
            a, b = np.searchsorted(ids, [lo, hi])
            out[ids[a:b].astype(np.int64) - lo] = vals[a:b]
            _write(dense, out)
        next_id = end
    for lo in range(next_id, m, segment):
        _write(dense, np.zeros(min(segment, m - lo), dtype="<u8"))
    for s in spills:
        s.path.unlink(missing_ok=True)
    return ExternalSearch(dense, taken, attempts, len(spills))


# -- orchestration -----------------------------------------------------------------


@dataclass
class ExternalStats(BuildStats):
    map_files: int = 0
    bucket_flushes: int = 0
    pilot_files: int = 0
    spill_history: list = field(default_factory=list)


def build_external(
    keys: Iterable[bytes] | Sequence[bytes],
    config: BuildConfig = BuildConfig(),
    ram_budget: int = 1 << 30,
    tmp_dir: str | os.PathLike | None = None,
    *,
    n: int | None = None,
    hasher: Hasher | None = None,
):
    """External-memory build; output is byte-identical to :func:`pthash.build.build`.

    ``keys`` must be re-iterable (a sequence, or an object whose ``__iter__``
    restarts) when a retry is needed. Temporary files live in a fresh
    directory under ``tmp_dir`` and are removed on success and failure.
    """
    from .mphf import Mphf

    if n is None:
        n = len(keys)  # type: ignore[arg-type]
    budget = MemoryBudget(ram_budget)
    failures: list[BaseException] = []
    t0 = time.perf_counter()
    for attempt in range(config.retries + 1):
        seed = seed_for_attempt(config.seed, attempt)
        cfg = replace(config, seed=seed)
        workdir = Path(tempfile.mkdtemp(prefix=f"pthash-{seed:016x}-", dir=tmp_dir))
        try:
            stats = ExternalStats(seed=seed)
            if n == 0:
                return Mphf.assemble(cfg, seed, None, np.zeros(0, np.uint64), TakenBitmap(0))
            mapper = cfg.mapper(n)
            t = time.perf_counter()
            runs = map_external(keys, n, cfg, budget, workdir, mapper=mapper, hasher=hasher)
            stats.map_files = len(runs)
            stats.phases["map"] = time.perf_counter() - t
            t = time.perf_counter()
            buckets = merge_external(runs, budget, mapper.m, workdir)
            stats.bucket_flushes = buckets.flushes
            for r in runs:
                r.path.unlink(missing_ok=True)
            stats.phases["merge"] = time.perf_counter() - t
            t = time.perf_counter()
            found = search_external(buckets, n, cfg, budget, workdir)
            stats.phases["search"] = time.perf_counter() - t
            stats.pilot_files = found.pilot_files
            stats.attempts = found.attempts
            pilots = np.fromfile(found.pilots_path, dtype="<u8").astype(np.uint64)
        except (DuplicateHashError, PilotSearchExhausted) as exc:
            log.info("external build attempt %d with seed %#x failed: %s", attempt, seed, exc)
            failures.append(exc)
            continue
        finally:
            shutil.rmtree(workdir, ignore_errors=True)
        mphf = Mphf.assemble(cfg, seed, mapper, pilots, found.taken)
        stats.retries = attempt
        stats.seconds = time.perf_counter() - t0
        mphf.stats = stats
        return mphf
    raise BuildError(
        f"external construction failed after {len(failures)} attempts; last error: {failures[-1]}",
        failures,
    )
