"""The queryable function: pilots + free array + the parameters to evaluate them."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .encoders import ENCODER_NAMES, ENCODER_TAGS, EliasFano, encode_pilots, read_encoder
from .errors import BadMagic, SerializationError, TruncatedStream, VersionMismatch
from .hashing import (
    DIGEST_XXH3_128,
    MIXER_IDENTITY,
    MIXER_SPLITMIX,
    BucketMapper,
    hash_key,
    hash_keys,
    hash_pilot,
    hash_pilots,
)
from .serial import Reader, Writer

MAGIC = b"PTHMPHF\x00"
FORMAT_VERSION = 1
# header: magic, format version, hash version, encoder tag, then six u64 fields
HEADER_SIZE = len(MAGIC) + 3 + 6 * 8

# One byte identifies both the key digest and the pilot mixer.
HASH_VERSIONS = {
    (DIGEST_XXH3_128, MIXER_SPLITMIX): 0x01,
    (DIGEST_XXH3_128, MIXER_IDENTITY): 0x81,
}
_HASH_VERSION_LOOKUP = {v: k for k, v in HASH_VERSIONS.items()}


class Mphf:
    stats = None

    def __init__(self, *, seed: int, n: int, n_prime: int, m: int, p1: int, p2: int,
                 encoder: str, pilots, free: EliasFano, mixer: int = MIXER_SPLITMIX):
        self.seed = seed
        self.n = n
        self.n_prime = n_prime
        self.m = m
        self.p1 = p1
        self.p2 = p2
        self.encoder = encoder
        self.pilots = pilots
        self.free = free
        self.mixer = mixer
        self.mapper = BucketMapper(n, m, p1, p2) if n else None

    @classmethod
    def assemble(cls, config, seed: int, mapper: BucketMapper | None, pilots: np.ndarray, taken
                 ) -> "Mphf":
        from .build import build_free_array

        n = mapper.n if mapper else 0
        free = build_free_array(taken, n, taken.n_prime)
        return cls(
            seed=seed,
            n=n,
            n_prime=taken.n_prime,
            m=mapper.m if mapper else 0,
            p1=mapper.p1 if mapper else 0,
            p2=mapper.p2 if mapper else 0,
            encoder=config.encoder,
            pilots=encode_pilots(pilots, config.encoder),
            free=EliasFano.encode(free, max(n, 1)),
            mixer=config.mixer,
        )

    def __len__(self) -> int:
        return self.n

    def __call__(self, key: bytes) -> int:
        return self.lookup(key)

    def lookup(self, key: bytes) -> int:
        """Position of ``key`` in [0, n). Keys outside the build set get an arbitrary value."""
        if self.n == 0:
            raise ValueError("lookup on an empty function")
        kh = hash_key(key, self.seed)
        pilot = self.pilots[self.mapper.bucket_of(kh.bucket_hash)]
        p = (kh.position_hash ^ hash_pilot(pilot, self.mixer)) % self.n_prime
        return p if p < self.n else self.free[p - self.n]

    def lookup_many(self, keys: Sequence[bytes]) -> np.ndarray:
        if len(keys) and self.n == 0:
            raise ValueError("lookup on an empty function")
        bucket_h, pos_h = hash_keys(keys, self.seed)
        return self.positions_from_hashes(bucket_h, pos_h)

    def positions_from_hashes(self, bucket_h: np.ndarray, pos_h: np.ndarray) -> np.ndarray:
        if len(bucket_h) == 0:
            return np.zeros(0, dtype=np.uint64)
        buckets = self.mapper.buckets_of(bucket_h).astype(np.int64)
        mixed = hash_pilots(self.pilots.take(buckets), self.mixer)
        p = (pos_h ^ mixed) % np.uint64(self.n_prime)
        over = p >= np.uint64(self.n)
        if over.any():
            p[over] = self.free.take((p[over] - np.uint64(self.n)).astype(np.int64))
        return p

    # -- serialization --

    @property
    def hash_version(self) -> int:
        return HASH_VERSIONS[(DIGEST_XXH3_128, self.mixer)]

    def write(self, out: Writer) -> None:
        out.raw(MAGIC)
        out.u8(FORMAT_VERSION)
        out.u8(self.hash_version)
        out.u8(ENCODER_TAGS[self.encoder])
        for value in (self.seed, self.n, self.n_prime, self.m, self.p1, self.p2):
            out.u64(value)
        self.write_payload(out)

    def write_payload(self, out: Writer) -> None:
        self.pilots.write(out)
        self.free.write(out)

    def to_bytes(self) -> bytes:
        out = Writer()
        self.write(out)
        return out.getvalue()

    @classmethod
    def read(cls, src: Reader) -> "Mphf":
        head = bytes(src.data[src.offset:src.offset + len(MAGIC)])
        if head != MAGIC:
            if len(head) < len(MAGIC) and MAGIC.startswith(head):
                raise TruncatedStream("stream ends inside the magic number")
            raise BadMagic(f"not a serialized function (magic {head!r})")
        src.raw(len(MAGIC))
        version = src.u8()
        if version != FORMAT_VERSION:
            raise VersionMismatch(f"format version {version}, expected {FORMAT_VERSION}")
        hash_version = src.u8()
        if hash_version not in _HASH_VERSION_LOOKUP:
            raise VersionMismatch(f"unknown digest/mixer version {hash_version:#x}")
        _, mixer = _HASH_VERSION_LOOKUP[hash_version]
        tag = src.u8()
        if tag not in ENCODER_NAMES:
            raise SerializationError(f"unknown pilot encoder tag {tag}")
        seed, n, n_prime, m, p1, p2 = (src.u64() for _ in range(6))
        if n and not (1 <= p2 < m or m == 1) or n and p1 > n:
            raise SerializationError("bucket mapping parameters out of range")
        return cls.read_payload(src, seed=seed, n=n, n_prime=n_prime, m=m, p1=p1, p2=p2,
                                encoder=ENCODER_NAMES[tag], mixer=mixer)

    @classmethod
    def read_payload(cls, src: Reader, **params) -> "Mphf":
        """Read pilots and free array for a function whose parameters are known."""
        n, n_prime, m = params["n"], params["n_prime"], params["m"]
        pilots = read_encoder(src)
        if getattr(pilots, "tag", None) != ENCODER_TAGS[params["encoder"]]:
            raise SerializationError("pilot payload tag does not match header")
        free = read_encoder(src)
        if not isinstance(free, EliasFano):
            raise SerializationError("free array must be Elias-Fano encoded")
        if len(pilots) != m or n_prime < n or len(free) != n_prime - n:
            raise SerializationError("payload sizes disagree with header")
        return cls(pilots=pilots, free=free, **params)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Mphf":
        src = Reader(data)
        out = cls.read(src)
        if not src.at_end():
            raise SerializationError(f"{len(data) - src.offset} trailing bytes after function")
        return out

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Mphf":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())

    def space_bits_per_key(self) -> float:
        """Serialized payload bits (header excluded) per key."""
        if self.n == 0:
            raise ValueError("space per key is undefined for an empty function")
        return (len(self.to_bytes()) - HEADER_SIZE) * 8 / self.n

    def pilots_bits(self) -> int:
        out = Writer()
        self.pilots.write(out)
        return 8 * out.offset

    def free_bits(self) -> int:
        return self.free.nbits


def serialize(f: Mphf) -> bytes:
    return f.to_bytes()


def deserialize(data: bytes) -> Mphf:
    return Mphf.from_bytes(data)


def lookup(f: Mphf, key: bytes) -> int:
    return f.lookup(key)


def space_bits_per_key(f: Mphf) -> float:
    return f.space_bits_per_key()
