"""Keyed pseudorandom permutation over 16-byte key blocks.

The permutation is a single AES-128 block encryption under a secret key.
Raw store keys of up to 15 bytes are padded injectively into one block, so
``permute_key`` is a bijection from short byte strings onto a subset of the
block space and ``unpermute_key`` recovers the raw key exactly.
"""

from __future__ import annotations

import random
import secrets
from dataclasses import dataclass, field
from typing import Iterable

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .errors import CorruptBlock, KeyTooLong, UsageError

BLOCK_SIZE = 16
KEY_SIZE = 16
MAX_RAW_KEY = BLOCK_SIZE - 1
SECURITY_BITS = 8 * KEY_SIZE


@dataclass(frozen=True)
class PrpKey:
    """A 128-bit secret. The repr never shows the key material."""

    secret: bytes = field(repr=False)

    def __post_init__(self) -> None:
        if not isinstance(self.secret, (bytes, bytearray)) or len(self.secret) != KEY_SIZE:
            raise UsageError(f"PRP key must be exactly {KEY_SIZE} bytes")
        object.__setattr__(self, "secret", bytes(self.secret))

    @classmethod
    def from_hex(cls, text: str) -> "PrpKey":
        try:
            raw = bytes.fromhex(text.strip())
        except ValueError as exc:
            raise UsageError(f"invalid PRP key hex: {exc}") from None
        return cls(raw)

    def hex(self) -> str:
        return self.secret.hex()

    def __repr__(self) -> str:
        return "PrpKey(<redacted>)"


class _Contexts:
    # ECB contexts carry no chaining state, so one pair per key can be reused
    # for any number of whole-block updates.
    __slots__ = ("enc", "dec")

    def __init__(self, secret: bytes) -> None:
        cipher = Cipher(algorithms.AES(secret), modes.ECB())
        self.enc = cipher.encryptor()
        self.dec = cipher.decryptor()


_contexts: dict[bytes, _Contexts] = {}


def _ctx(key: PrpKey) -> _Contexts:
    ctx = _contexts.get(key.secret)
    if ctx is None:
        if len(_contexts) > 64:
            _contexts.clear()
        ctx = _contexts[key.secret] = _Contexts(key.secret)
    return ctx


def prp_keygen(rng_seed: int | None = None) -> PrpKey:
    """Generate a key from OS entropy, or deterministically from ``rng_seed``."""
    if rng_seed is None:
        return PrpKey(secrets.token_bytes(KEY_SIZE))
    return PrpKey(random.Random(rng_seed).randbytes(KEY_SIZE))


def _check_block(block: bytes) -> None:
    if len(block) != BLOCK_SIZE:
        raise UsageError(f"block must be {BLOCK_SIZE} bytes, got {len(block)}")


def prp_forward(key: PrpKey, block: bytes) -> bytes:
    _check_block(block)
    return _ctx(key).enc.update(bytes(block))


def prp_inverse(key: PrpKey, block: bytes) -> bytes:
    _check_block(block)
    return _ctx(key).dec.update(bytes(block))


def encode_key(raw: bytes) -> bytes:
    """Pad ``raw`` (at most 15 bytes) into a block.

    Layout: ``raw || 0x80 || 0x00...`` truncated to 15 bytes, then one byte
    holding ``len(raw)``. The trailing length makes the map injective even
    for 15-byte keys, where the 0x80 marker no longer fits.
    """
    n = len(raw)
    if n > MAX_RAW_KEY:
        raise KeyTooLong(f"raw key is {n} bytes; at most {MAX_RAW_KEY} fit in one block")
    body = (bytes(raw) + b"\x80").ljust(MAX_RAW_KEY, b"\x00")[:MAX_RAW_KEY]
    return body + bytes((n,))


def decode_key(block: bytes) -> bytes:
    if len(block) != BLOCK_SIZE:
        raise CorruptBlock("padded block has wrong width")
    n = block[-1]
    if n > MAX_RAW_KEY:
        raise CorruptBlock("length byte out of range")
    raw = bytes(block[:n])
    if encode_key(raw) != bytes(block):
        raise CorruptBlock("padding does not match")
    return raw


def permute_key(key: PrpKey, raw: bytes) -> bytes:
    return _ctx(key).enc.update(encode_key(raw))


def unpermute_key(key: PrpKey, block: bytes) -> bytes:
    if len(block) != BLOCK_SIZE:
        raise CorruptBlock("permuted key has wrong width")
    return decode_key(_ctx(key).dec.update(bytes(block)))


def permute_keys(key: PrpKey, raws: Iterable[bytes]) -> list[bytes]:
    """Bulk ``permute_key``; one cipher call for the whole batch."""
    padded = b"".join(encode_key(r) for r in raws)
    out = _ctx(key).enc.update(padded)
    return [out[i:i + BLOCK_SIZE] for i in range(0, len(out), BLOCK_SIZE)]
