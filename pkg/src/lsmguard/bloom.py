"""Standard Bloom filter with double hashing, plus the PRP-keyed wrapper.

Hash positions are ``h_i(x) = (a + i*b) mod m`` for ``i < k`` where ``a`` and
``b`` are two independently seeded 64-bit xxHash digests of ``x``. The
arithmetic is over the integers (no 64-bit wraparound), which lets scalar and
vectorised code agree exactly.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import xxhash

from . import prp
from .errors import InvalidParams

MASK64 = (1 << 64) - 1
_SECOND_SEED_XOR = 0x9E3779B97F4A7C15
_HEADER = struct.Struct("<IIQ")
_xxh64 = xxhash.xxh64_intdigest


@dataclass(frozen=True)
class BloomParams:
    m_bits: int
    k_hashes: int
    hash_seed: int = 0

    def __post_init__(self) -> None:
        if self.m_bits < 1 or self.k_hashes < 1:
            raise InvalidParams("m_bits and k_hashes must be positive")
        if self.k_hashes > self.m_bits:
            raise InvalidParams("k_hashes must not exceed m_bits")
        if self.m_bits >= 1 << 32:
            raise InvalidParams("m_bits must fit in 32 bits")
        if not 0 <= self.hash_seed <= MASK64:
            raise InvalidParams("hash_seed must be a 64-bit unsigned integer")


def hash_pair(key: bytes, seed: int) -> tuple[int, int]:
    return _xxh64(key, seed), _xxh64(key, seed ^ _SECOND_SEED_XOR)


def hash_pairs(keys: Sequence[bytes], seed: int) -> tuple[np.ndarray, np.ndarray]:
    seed2 = seed ^ _SECOND_SEED_XOR
    a = np.fromiter((_xxh64(x, seed) for x in keys), dtype=np.uint64, count=len(keys))
    b = np.fromiter((_xxh64(x, seed2) for x in keys), dtype=np.uint64, count=len(keys))
    return a, b


def positions(key: bytes, params: BloomParams) -> list[int]:
    """The k bit indices for ``key`` (may repeat for degenerate ``b``)."""
    a, b = hash_pair(key, params.hash_seed)
    m = params.m_bits
    return [(a + i * b) % m for i in range(params.k_hashes)]


def position_matrix(a: np.ndarray, b: np.ndarray, m: int, k: int) -> np.ndarray:
    """Vectorised positions: an ``(len(a), k)`` int64 array."""
    am = (a % np.uint64(m)).astype(np.int64)
    bm = (b % np.uint64(m)).astype(np.int64)
    steps = np.arange(k, dtype=np.int64)
    return (am[:, None] + steps[None, :] * bm[:, None]) % m


class BloomState:
    """Bit array plus counters. Bits are packed little-endian into 64-bit words."""

    __slots__ = ("params", "bits", "set_count", "n_inserted")

    def __init__(self, params: BloomParams):
        self.params = params
        self.bits = bytearray(8 * ((params.m_bits + 63) // 64))
        self.set_count = 0
        self.n_inserted = 0

    def insert(self, key: bytes) -> None:
        a, b = hash_pair(key, self.params.hash_seed)
        self.insert_hashed(a, b)

    def insert_hashed(self, a: int, b: int) -> None:
        bits = self.bits
        m = self.params.m_bits
        for i in range(self.params.k_hashes):
            p = (a + i * b) % m
            mask = 1 << (p & 7)
            if not bits[p >> 3] & mask:
                bits[p >> 3] |= mask
                self.set_count += 1
        self.n_inserted += 1

    def insert_many(self, keys: Sequence[bytes]) -> None:
        if not len(keys):
            return
        a, b = hash_pairs(keys, self.params.hash_seed)
        pos = position_matrix(a, b, self.params.m_bits, self.params.k_hashes).ravel()
        view = np.frombuffer(self.bits, dtype=np.uint8)
        np.bitwise_or.at(view, pos >> 3, (1 << (pos & 7)).astype(np.uint8))
        self.set_count = int(np.unpackbits(view).sum())
        self.n_inserted += len(keys)

    def query(self, key: bytes) -> bool:
        a, b = hash_pair(key, self.params.hash_seed)
        return self.query_hashed(a, b)

    def query_hashed(self, a: int, b: int) -> bool:
        bits = self.bits
        m = self.params.m_bits
        for i in range(self.params.k_hashes):
            p = (a + i * b) % m
            if not bits[p >> 3] >> (p & 7) & 1:
                return False
        return True

    def query_many(self, keys: Sequence[bytes]) -> np.ndarray:
        a, b = hash_pairs(keys, self.params.hash_seed)
        pos = position_matrix(a, b, self.params.m_bits, self.params.k_hashes)
        return self.bit_vector()[pos].all(axis=1)

    def bit_vector(self) -> np.ndarray:
        """Unpacked bool array of length m."""
        view = np.frombuffer(self.bits, dtype=np.uint8)
        return np.unpackbits(view, bitorder="little")[: self.params.m_bits].astype(bool)

    def fill_fraction(self) -> float:
        return self.set_count / self.params.m_bits

    def copy(self) -> "BloomState":
        other = BloomState(self.params)
        other.bits[:] = self.bits
        other.set_count = self.set_count
        other.n_inserted = self.n_inserted
        return other

    def to_bytes(self) -> bytes:
        p = self.params
        return _HEADER.pack(p.m_bits, p.k_hashes, p.hash_seed) + bytes(self.bits)

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0, n_inserted: int = 0) -> tuple["BloomState", int]:
        """Parse a serialized filter block; returns the state and bytes consumed."""
        m, k, seed = _HEADER.unpack_from(buf, offset)
        state = cls(BloomParams(m, k, seed))
        start = offset + _HEADER.size
        width = len(state.bits)
        if start + width > len(buf):
            raise ValueError("truncated bloom block")
        state.bits[:] = buf[start:start + width]
        state.set_count = int(np.unpackbits(np.frombuffer(state.bits, dtype=np.uint8)).sum())
        state.n_inserted = n_inserted
        return state, _HEADER.size + width

    def __eq__(self, other: object) -> bool:
        return isinstance(other, BloomState) and self.params == other.params and self.bits == other.bits

    def __repr__(self) -> str:
        p = self.params
        return f"BloomState(m={p.m_bits}, k={p.k_hashes}, set={self.set_count}, n={self.n_inserted})"


# Spec-facing operations. The methods above are the implementation.

def bf_new(params: BloomParams) -> BloomState:
    return BloomState(params)


def bf_insert(state: BloomState, key: bytes) -> BloomState:
    state.insert(key)
    return state


def bf_query(state: BloomState, key: bytes) -> bool:
    return state.query(key)


def bf_fill_fraction(state: BloomState) -> float:
    return state.fill_fraction()


def bf_theoretical_fpr(params: BloomParams, n: int) -> float:
    """Standard estimate ``(1 - (1 - 1/m)^(k n))^k``."""
    if n < 0:
        raise InvalidParams("n must be non-negative")
    if n == 0:
        return 0.0
    m, k = params.m_bits, params.k_hashes
    if m == 1:
        return 1.0
    fill = -math.expm1(k * n * math.log1p(-1.0 / m))
    return fill ** k


def random_probe_keys(count: int, rng_seed: int | None, width: int = 16) -> list[bytes]:
    """Uniformly random keys of ``width`` bytes."""
    rng = np.random.default_rng(rng_seed)
    raw = rng.integers(0, 256, size=(count, width), dtype=np.uint8).tobytes()
    return [raw[i:i + width] for i in range(0, count * width, width)]


def bf_measure_fpr(state: BloomState, probes: int, rng_seed: int | None = None,
                   exclude: Iterable[bytes] | None = None) -> float:
    """Fraction of random keys (not in ``exclude``) the filter accepts.

    Probe keys are 16 random bytes; without ``exclude`` a collision with an
    inserted key is a 2^-128 event and is ignored.
    """
    if probes <= 0:
        return 0.0
    keys = random_probe_keys(probes, rng_seed)
    if exclude is not None:
        skip = set(exclude)
        keys = [x for x in keys if x not in skip]
        if not keys:
            return 0.0
    return float(state.query_many(keys).mean())


def expected_random_saturation(params: BloomParams) -> int:
    """Random insertions expected to fill every bit: floor(m ln m / k)."""
    m = params.m_bits
    return math.floor(m * math.log(m) / params.k_hashes)


def secure_bf_insert(state: BloomState, prp_key: prp.PrpKey, key: bytes) -> BloomState:
    state.insert(prp.permute_key(prp_key, key))
    return state


def secure_bf_query(state: BloomState, prp_key: prp.PrpKey, key: bytes) -> bool:
    return state.query(prp.permute_key(prp_key, key))
