"""Pilot search over buckets processed largest-first.

The sequential search and the multi-worker search produce the same pilots:
every candidate rejected against some bitmap state is also rejected against
any later state (bits are only ever set), so a worker may discard candidates
early against a stale view and resume from where it paused once it holds the
commit turn.
"""
from __future__ import annotations

import ctypes
import ctypes.util
import math
import threading
from dataclasses import dataclass

import numba as nb
import numpy as np

from .bits import words_for
from .errors import PilotSearchExhausted
from .hashing import MIXER_IDENTITY, MIXER_SPLITMIX

DEFAULT_SEARCH_LIMIT = 1 << 32


def search_space(n: int, alpha: float) -> int:
    """n' = ceil(n / alpha), never below n."""
    return max(n, math.ceil(n / alpha))


@nb.njit(cache=True, nogil=True, inline="always")
def _mix_pilot(k, mixer):
    if mixer == MIXER_IDENTITY:
        return k
    z = k + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@nb.njit(cache=True, nogil=True)
def never_fits(hashes, lo, hi, n_prime):
    """True when two keys of the bucket collide under every pilot.

    (a ^ x) - (b ^ x) ranges over all sign patterns of the differing bits, so
    a permanent collision needs n' to divide each 2^(j+1): only a power-of-two
    n' with equal low bits (or equal hashes) qualifies.
    """
    npr = np.uint64(n_prime)
    mask = npr - np.uint64(1) if (npr & (npr - np.uint64(1))) == 0 else ~np.uint64(0)
    for j in range(lo + 1, hi):
        for t in range(lo, j):
            if (hashes[j] & mask) == (hashes[t] & mask):
                return True
    return False


@nb.njit(cache=True, nogil=True)
def advance(hashes, lo, hi, taken, n_prime, start, limit, mixer, positions):
    """First pilot >= start placing hashes[lo:hi] on free, distinct slots.

    Fills ``positions[:hi-lo]`` and returns the pilot, or -1 once ``limit`` is
    hit or no pilot can ever work.
    """
    if start == 0 and never_fits(hashes, lo, hi, n_prime):
        return -1
    size = hi - lo
    npr = np.uint64(n_prime)
    k = start
    while k < limit:
        hk = _mix_pilot(np.uint64(k), mixer)
        ok = True
        for j in range(size):
            p = np.int64((hashes[lo + j] ^ hk) % npr)
            if (taken[p >> 6] >> np.uint64(p & 63)) & np.uint64(1):
                ok = False
                break
            for t in range(j):
                if positions[t] == p:
                    ok = False
                    break
            if not ok:
                break
            positions[j] = p
        if ok:
            return k
        k += 1
    return -1


@nb.njit(cache=True, nogil=True)
def commit(taken, positions, size):
    for j in range(size):
        p = positions[j]
        taken[p >> 6] |= np.uint64(1) << np.uint64(p & 63)


@nb.njit(cache=True, nogil=True)
def _search_all(ids, offsets, hashes, taken, n_prime, limit, mixer, pilots, positions):
    """Returns -1 on success, else the iteration rank of the exhausted bucket."""
    for r in range(ids.shape[0]):
        lo = offsets[r]
        hi = offsets[r + 1]
        k = advance(hashes, lo, hi, taken, n_prime, 0, limit, mixer, positions)
        if k < 0:
            return r
        commit(taken, positions, hi - lo)
        pilots[ids[r]] = np.uint64(k)
    return -1


class TakenBitmap:
    """Occupancy of the search space [0, n'); bits are only ever set."""

    def __init__(self, n_prime: int, words: np.ndarray | None = None):
        self.n_prime = n_prime
        self.words = np.zeros(words_for(n_prime), dtype=np.uint64) if words is None else words

    def __getitem__(self, p: int) -> bool:
        return bool((int(self.words[p >> 6]) >> (p & 63)) & 1)

    def set(self, p: int) -> None:
        self.words[p >> 6] |= np.uint64(1 << (p & 63))

    def to_bool(self) -> np.ndarray:
        bits = np.unpackbits(self.words.view(np.uint8), bitorder="little")
        return bits[: self.n_prime].astype(bool)

    def popcount(self) -> int:
        return int(np.unpackbits(self.words.view(np.uint8)).sum())

    @property
    def nbytes(self) -> int:
        return self.words.nbytes


@dataclass
class SearchResult:
    pilots: np.ndarray
    taken: TakenBitmap
    attempts: int


def _attempts(pilots: np.ndarray, ids: np.ndarray) -> int:
    # pilot k for a bucket means candidates 0..k were all tried
    return int(pilots[ids].sum()) + len(ids)


def _flat(buckets):
    return (
        np.ascontiguousarray(buckets.ids, dtype=np.int64),
        np.ascontiguousarray(buckets.offsets, dtype=np.int64),
        np.ascontiguousarray(buckets.hashes, dtype=np.uint64),
    )


def search_sequential(
    buckets,
    n: int,
    alpha: float | None = None,
    limit: int = DEFAULT_SEARCH_LIMIT,
    *,
    n_prime: int | None = None,
    mixer: int = MIXER_SPLITMIX,
    taken: TakenBitmap | None = None,
    pilots: np.ndarray | None = None,
) -> SearchResult:
    """Search pilots for ``buckets`` (any object exposing ids/offsets/hashes/num_buckets).

    ``taken`` and ``pilots`` may be passed in to continue a search over a
    stream of bucket chunks.
    """
    n_prime = _resolve_n_prime(n, alpha, n_prime)
    ids, offsets, hashes = _flat(buckets)
    if taken is None:
        taken = TakenBitmap(n_prime)
    if pilots is None:
        pilots = np.zeros(buckets.num_buckets, dtype=np.uint64)
    positions = np.empty(max(buckets.max_size, 1), dtype=np.int64)
    failed = _search_all(ids, offsets, hashes, taken.words, n_prime, limit, mixer, pilots, positions)
    if failed >= 0:
        raise PilotSearchExhausted(int(ids[failed]), limit)
    return SearchResult(pilots, taken, _attempts(pilots, ids))


def _load_yield():
    """ctypes handle on the OS thread-yield call, or None where there is none."""
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or None)
        fn = libc.sched_yield
    except (OSError, AttributeError):
        return None
    fn.restype = ctypes.c_int
    fn.argtypes = []
    return fn


_sched_yield = _load_yield()

if _sched_yield is not None:
    @nb.njit(nogil=True, inline="always")
    def _yield():
        _sched_yield()
else:  # pragma: no cover
    @nb.njit(nogil=True, inline="always")
    def _yield():
        pass


# layout of the shared turn array
TURN = 0  # rank of the next bucket allowed to commit
FAILED = 1  # 1 + rank of an exhausted bucket, 0 while none


@nb.njit(nogil=True)
def _worker_loop(worker, workers, ids, offsets, hashes, taken, n_prime, limit, mixer, pilots,
                 positions, turn):
    for r in range(worker, ids.shape[0], workers):
        lo = offsets[r]
        hi = offsets[r + 1]
        # speculative phase: discard candidates against the current, maybe stale, view
        k = advance(hashes, lo, hi, taken, n_prime, 0, limit, mixer, positions)
        seen = turn[TURN]
        while turn[TURN] != r:
            if turn[FAILED] != 0:
                return
            now = turn[TURN]
            if k >= 0 and now != seen:
                seen = now
                k = advance(hashes, lo, hi, taken, n_prime, k, limit, mixer, positions)
            _yield()
        # our turn: the bitmap is authoritative, revalidate and resume from k
        if k >= 0:
            k = advance(hashes, lo, hi, taken, n_prime, k, limit, mixer, positions)
        if k < 0:
            turn[FAILED] = r + 1
            return
        commit(taken, positions, hi - lo)
        pilots[ids[r]] = np.uint64(k)
        turn[TURN] = r + 1


def new_turn() -> np.ndarray:
    """Shared [turn, failed] counters; read and written without locking."""
    return np.zeros(2, dtype=np.int64)


def _worker(worker, workers, ids, offsets, hashes, taken, n_prime, limit, mixer, pilots,
            positions, turn, errors=None) -> None:
    try:
        _worker_loop(worker, workers, ids, offsets, hashes, taken, n_prime, limit, mixer, pilots,
                     positions, turn)
    except BaseException as exc:  # surface crashes; stop the others
        if errors is not None:
            errors.append(exc)
        turn[FAILED] = -1


def search_parallel(
    buckets,
    n: int,
    alpha: float | None = None,
    workers: int = 1,
    limit: int = DEFAULT_SEARCH_LIMIT,
    *,
    n_prime: int | None = None,
    mixer: int = MIXER_SPLITMIX,
    taken: TakenBitmap | None = None,
    pilots: np.ndarray | None = None,
) -> SearchResult:
    """Multi-worker search; worker i owns the buckets at ranks r with r % workers == i.

    Commits happen strictly in rank order, gated by a shared turn counter
    that workers poll with an OS yield between polls; no lock is taken.
    Workers run entirely inside compiled code with the GIL released.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if workers == 1:
        return search_sequential(buckets, n, alpha, limit, n_prime=n_prime, mixer=mixer,
                                 taken=taken, pilots=pilots)
    n_prime = _resolve_n_prime(n, alpha, n_prime)
    ids, offsets, hashes = _flat(buckets)
    if taken is None:
        taken = TakenBitmap(n_prime)
    if pilots is None:
        pilots = np.zeros(buckets.num_buckets, dtype=np.uint64)
    turn = new_turn()
    errors: list[BaseException] = []
    threads = [
        threading.Thread(
            target=_worker,
            args=(i, workers, ids, offsets, hashes, taken.words, n_prime, limit, mixer,
                  pilots, np.empty(max(buckets.max_size, 1), dtype=np.int64), turn, errors),
            name=f"pilot-search-{i}",
            daemon=True,
        )
        for i in range(workers)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    if turn[FAILED] > 0:
        raise PilotSearchExhausted(int(ids[turn[FAILED] - 1]), limit)
    return SearchResult(pilots, taken, _attempts(pilots, ids))


def _resolve_n_prime(n: int, alpha: float | None, n_prime: int | None) -> int:
    if n_prime is not None:
        return n_prime
    if alpha is None:
        raise TypeError("pass alpha or n_prime")
    return search_space(n, alpha)
