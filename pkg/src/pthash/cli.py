"""pthash command line: build, query, verify and bench minimal perfect hash functions.

Keys come either from a newline-delimited file (each line's raw bytes, the
trailing newline optional) or from the synthetic generator (--gen N --seed S),
which renders N distinct 64-bit splitmix outputs as 8 little-endian bytes.

Report rows are CSV with the columns in REPORT_FIELDS. Bench rows leave the
build-only columns (c, alpha, workers, construction_seconds, pilot_attempts)
empty since a saved function does not record how it was built.

Exit codes: 0 ok, 1 verification failed, 2 bad usage, 3 build failed, 4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, fields

import numba as nb
import numpy as np

from .build import BuildConfig, build
from .encoders import ENCODER_TAGS
from .errors import BuildError, PthashError, SerializationError
from .extmem import build_external
from .hashing import MASK64, mix64_array
from .hem import PartitionedMphf, build_partitioned, load, partitions_for

log = logging.getLogger("pthash")

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_USAGE = 2
EXIT_BUILD = 3
EXIT_IO = 4

CLI_PARTITION_SIZE = 100_000
BENCH_BATCH = 1 << 16
_GOLDEN = 0x9E3779B97F4A7C15


@dataclass
class RunReport:
    n: int
    c: float | str
    alpha: float | str
    encoder: str
    workers: int | str
    mode: str
    construction_seconds: float | str
    bits_per_key: float | str
    lookup_ns_per_key: float | str
    pilot_attempts: int | str
    seed: int


REPORT_FIELDS = [f.name for f in fields(RunReport)]


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# -- keys -----------------------------------------------------------------------


def generate_keys(n: int, seed: int) -> list[bytes]:
    """n distinct keys: the splitmix64 stream seeded with ``seed``, 8 bytes each."""
    steps = np.arange(n, dtype=np.uint64) * np.uint64(_GOLDEN)
    vals = mix64_array(steps + np.uint64(seed & MASK64))
    if len(np.unique(vals)) != n:  # cannot happen, the finalizer is a bijection
        raise CliError("synthetic generator produced a duplicate", EXIT_BUILD)
    raw = vals.astype("<u8").tobytes()
    return [raw[i:i + 8] for i in range(0, 8 * n, 8)]


def read_key_file(path: str) -> list[bytes]:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise CliError(f"cannot read key file {path}: {exc.strerror}", EXIT_IO) from exc
    if not data:
        return []
    lines = data.split(b"\n")
    if lines[-1] == b"":
        lines.pop()
    return lines


def find_duplicate(keys: list[bytes]) -> tuple[int, int] | None:
    """1-based line numbers of the first repeated key and its earlier copy."""
    seen: dict[bytes, int] = {}
    for i, key in enumerate(keys, 1):
        first = seen.setdefault(key, i)
        if first != i:
            return first, i
    return None


def load_keys(args) -> list[bytes]:
    if args.input is not None:
        keys = read_key_file(args.input)
    else:
        keys = generate_keys(args.gen, args.seed)
    log.info("loaded %d keys", len(keys))
    return keys


# -- helpers --------------------------------------------------------------------


def parse_size(text: str) -> int:
    """Byte count with an optional K/M/G suffix (powers of 1024)."""
    units = {"k": 1 << 10, "m": 1 << 20, "g": 1 << 30}
    t = text.strip().lower().rstrip("b")
    scale = units.get(t[-1:], 1)
    if scale != 1:
        t = t[:-1]
    try:
        value = int(float(t) * scale)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a byte size: {text!r}") from None
    if value <= 0:
        raise argparse.ArgumentTypeError("size must be positive")
    return value


def load_function(path: str):
    try:
        return load(path)
    except OSError as exc:
        raise CliError(f"cannot read function file {path}: {exc.strerror}", EXIT_IO) from exc
    except SerializationError as exc:
        raise CliError(f"{path}: {exc}", EXIT_IO) from exc


def emit(rows: list[RunReport], path: str | None) -> None:
    try:
        if path is None:
            out, new = sys.stdout, True
        else:
            new = not os.path.exists(path) or os.path.getsize(path) == 0
            out = open(path, "a", newline="")
        try:
            w = csv.DictWriter(out, REPORT_FIELDS, lineterminator="\n")
            if new:
                w.writeheader()
            for row in rows:
                w.writerow(asdict(row))
        finally:
            if out is not sys.stdout:
                out.close()
    except OSError as exc:
        raise CliError(f"cannot write report {path}: {exc.strerror}", EXIT_IO) from exc


def time_lookups(f, keys: list[bytes], repetitions: int = 1) -> float:
    """Average ns per key over ``repetitions`` passes of batched lookups."""
    if not keys:
        return float("nan")
    batches = [keys[i:i + BENCH_BATCH] for i in range(0, len(keys), BENCH_BATCH)]
    f.lookup_many(batches[0][:1])  # warm up compiled kernels
    total = 0.0
    for _ in range(repetitions):
        t = time.perf_counter()
        for batch in batches:
            f.lookup_many(batch)
        total += time.perf_counter() - t
    return total / repetitions / len(keys) * 1e9


def _mode(external: bool, f) -> str:
    return ("external" if external else "internal") + ("-hem" if isinstance(f, PartitionedMphf) else "-flat")


def _bits(f) -> float | str:
    return round(f.space_bits_per_key(), 6) if f.n else ""


@nb.njit(cache=True)
def first_violation(values, n):
    """Index of the first value that is >= n or repeats an earlier one, else -1."""
    seen = np.zeros((n + 63) >> 6, dtype=np.uint64)
    for i in range(values.shape[0]):
        v = values[i]
        if v >= n:
            return i
        w = np.int64(v >> np.uint64(6))
        bit = np.uint64(1) << (v & np.uint64(63))
        if seen[w] & bit:
            return i
        seen[w] |= bit
    return -1


# -- commands -------------------------------------------------------------------


def cmd_build(args) -> int:
    keys = load_keys(args)
    dup = find_duplicate(keys) if args.input is not None else None
    if dup:
        raise CliError(f"duplicate key on lines {dup[0]} and {dup[1]}", EXIT_BUILD)
    try:
        config = BuildConfig(c=args.c, alpha=args.alpha, seed=args.seed, workers=args.threads,
                             encoder=args.encoder)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc
    r = args.partitions
    if r is None and args.avg_partition_size is not None:
        r = partitions_for(len(keys), args.avg_partition_size)
    budget = args.ram_budget if args.external else None
    try:
        if r is not None:
            f = build_partitioned(keys, config, r, ram_budget=budget, tmp_dir=args.tmp_dir)
        elif args.external:
            f = build_external(keys, config, budget, args.tmp_dir)
        else:
            f = build(keys, config)
    except (BuildError, PthashError, ValueError) as exc:
        raise CliError(f"build failed: {exc}", EXIT_BUILD) from exc
    except OSError as exc:
        raise CliError(f"build failed on I/O: {exc}", EXIT_IO) from exc
    try:
        f.save(args.output)
    except OSError as exc:
        raise CliError(f"cannot write {args.output}: {exc.strerror}", EXIT_IO) from exc
    stats = f.stats
    row = RunReport(
        n=len(keys), c=args.c, alpha=args.alpha, encoder=args.encoder, workers=args.threads,
        mode=_mode(args.external, f),
        construction_seconds=round(stats.seconds, 6) if stats else 0.0,
        bits_per_key=_bits(f),
        lookup_ns_per_key=round(time_lookups(f, keys), 3) if keys else "",
        pilot_attempts=stats.attempts if stats else 0,
        seed=args.seed,
    )
    emit([row], args.report)
    log.info("wrote %s (n=%d, m=%d)", args.output, f.n, f.m)
    return EXIT_OK


def cmd_query(args) -> int:
    f = load_function(args.function)
    keys = [k.encode() for k in args.keys]
    if args.input is not None:
        keys += read_key_file(args.input)
    if not keys:
        return EXIT_OK
    if f.n == 0:
        raise CliError("cannot query an empty function", EXIT_VERIFY)
    for key, pos in zip(keys, f.lookup_many(keys).tolist()):
        print(f"{key.decode(errors='backslashreplace')}\t{pos}")
    return EXIT_OK


def cmd_verify(args) -> int:
    f = load_function(args.function)
    keys = load_keys(args)
    if len(keys) != f.n:
        print(f"mismatch: function has n={f.n} but the key source has {len(keys)} keys")
        return EXIT_VERIFY
    if not keys:
        print("ok: empty function")
        return EXIT_OK
    values = f.lookup_many(keys)
    i = int(first_violation(values, np.uint64(f.n)))
    if i < 0:
        print(f"ok: {f.n} keys map onto [0, {f.n})")
        return EXIT_OK
    v = int(values[i])
    what = "out of range" if v >= f.n else "duplicate position"
    print(f"violation: key #{i + 1} maps to {v} ({what})")
    return EXIT_VERIFY


def cmd_bench(args) -> int:
    f = load_function(args.function)
    keys = load_keys(args)
    if not keys:
        emit([], args.report)
        return EXIT_OK
    if len(keys) != f.n:
        raise CliError(f"function has n={f.n} but the key source has {len(keys)} keys", EXIT_VERIFY)
    ns = time_lookups(f, keys, args.repetitions)
    row = RunReport(
        n=f.n, c="", alpha="", encoder=f.encoder, workers="", mode=_mode(False, f).replace("internal", "query"),
        construction_seconds="", bits_per_key=_bits(f), lookup_ns_per_key=round(ns, 3),
        pilot_attempts="", seed=f.seed,
    )
    emit([row], args.report)
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------


def _add_keys(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", "-i", metavar="PATH", help="newline-delimited key file")
    src.add_argument("--gen", type=int, metavar="N", help="generate N synthetic 64-bit keys")
    p.add_argument("--seed", type=int, default=1, help="generator and hashing seed (default 1)")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pthash", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build", help="build a function and write it to a file")
    _add_keys(b)
    b.add_argument("-o", "--output", required=True, help="function file to write")
    b.add_argument("-c", type=float, default=7.0, help="bucket density constant (default 7.0)")
    b.add_argument("-a", "--alpha", type=float, default=0.94, help="load factor (default 0.94)")
    b.add_argument("--encoder", choices=sorted(ENCODER_TAGS), default="dd")
    b.add_argument("--threads", type=int, default=1, help="worker threads")
    b.add_argument("--external", action="store_true", help="bounded-memory construction")
    b.add_argument("--ram-budget", type=parse_size, default=None, metavar="BYTES",
                   help="memory budget for --external (default $PTHASH_RAM_BUDGET or 1G)")
    b.add_argument("--tmp-dir", default=None, help="spill directory (default $PTHASH_TMPDIR or system temp)")
    part = b.add_mutually_exclusive_group()
    part.add_argument("--partitions", type=int, metavar="R", help="build R partitions")
    part.add_argument("--avg-partition-size", type=int, nargs="?", const=CLI_PARTITION_SIZE,
                      metavar="B", help=f"partition with about B keys each (default {CLI_PARTITION_SIZE})")
    b.add_argument("--report", metavar="PATH", help="append the CSV report row here instead of stdout")
    b.set_defaults(func=cmd_build)

    q = sub.add_parser("query", help="print the position of each key")
    q.add_argument("function")
    q.add_argument("keys", nargs="*", help="keys given on the command line")
    q.add_argument("--input", "-i", metavar="PATH", help="also query every line of this file")
    q.set_defaults(func=cmd_query)

    v = sub.add_parser("verify", help="check that the keys map onto [0, n)")
    v.add_argument("function")
    _add_keys(v)
    v.set_defaults(func=cmd_verify)

    r = sub.add_parser("bench", help="time lookups over every key")
    r.add_argument("function")
    _add_keys(r)
    r.add_argument("--repetitions", type=int, default=5, help="timed passes to average (default 5)")
    r.add_argument("--report", metavar="PATH")
    r.set_defaults(func=cmd_bench)
    return parser


def _check(parser: argparse.ArgumentParser, args) -> None:
    if getattr(args, "gen", None) is not None and args.gen < 0:
        parser.error("--gen must be >= 0")
    if args.command == "build":
        if not args.external and (args.ram_budget is not None or args.tmp_dir is not None):
            parser.error("--ram-budget and --tmp-dir need --external")
        if args.threads < 1:
            parser.error("--threads must be >= 1")
        if args.partitions is not None and args.partitions < 1:
            parser.error("--partitions must be >= 1")
        if args.avg_partition_size is not None and args.avg_partition_size < 1:
            parser.error("--avg-partition-size must be >= 1")
        if args.external:
            if args.ram_budget is None:
                args.ram_budget = parse_size(os.environ.get("PTHASH_RAM_BUDGET", "1G"))
            if args.tmp_dir is None:
                args.tmp_dir = os.environ.get("PTHASH_TMPDIR") or None
    if args.command == "bench" and args.repetitions < 1:
        parser.error("--repetitions must be >= 1")


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    _check(parser, args)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"pthash: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
