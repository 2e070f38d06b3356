"""Minimal perfect hashing with compressed pilot tables.

Typical use::

    from pthash import BuildConfig, build
    f = build(keys, BuildConfig(encoder="ef"))
    f.lookup(keys[0])   # -> position in [0, len(keys))
"""
from .build import BuildConfig, BuildStats, build
from .errors import (
    BadMagic,
    BudgetExceeded,
    BuildError,
    DuplicateHashError,
    EncodingError,
    PilotSearchExhausted,
    PthashError,
    SerializationError,
    TruncatedStream,
    VersionMismatch,
)
from .extmem import build_external
from .hem import PartitionedMphf, build_partitioned, load
from .mphf import Mphf, deserialize, serialize

__version__ = "0.1.0"

__all__ = [
    "BadMagic",
    "BudgetExceeded",
    "BuildConfig",
    "BuildError",
    "BuildStats",
    "DuplicateHashError",
    "EncodingError",
    "Mphf",
    "PartitionedMphf",
    "PilotSearchExhausted",
    "PthashError",
    "SerializationError",
    "TruncatedStream",
    "VersionMismatch",
    "build",
    "build_external",
    "build_partitioned",
    "deserialize",
    "load",
    "serialize",
]
