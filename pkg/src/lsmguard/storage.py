"""Sorted-run files: data blocks, fence pointers, embedded Bloom filter.

File layout, all integers little-endian::

    header   "LSMA" u32 version
    blocks   block_size bytes each; entries packed as
             [u32 key_len][u32 val_len | 0xFFFFFFFF tombstone][u64 seq][key][value]
             zero padded; the last 4 bytes are crc32 of the rest of the block
    bloom    [u32 m_bits][u32 k_hashes][u64 hash_seed][ceil(m/64) u64 words]
    fence    [u32 count] then per block [u32 key_len][first_key][u64 offset][u32 len]
    footer   [u64 bloom_off][u64 fence_off][u32 crc32(offsets)] "LSMZ"

A point read consults the in-memory fence array and touches exactly one
data block, which is the page-cost unit the rest of the package counts.
"""

from __future__ import annotations

import json
import math
import os
import struct
import zlib
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional, Sequence

from .bloom import BloomParams, BloomState
from .errors import CorruptRun, EmptyRun, InvariantViolation, OpenFailed, UsageError

MAGIC = b"LSMA"
FOOTER_MAGIC = b"LSMZ"
FORMAT_VERSION = 1
DEFAULT_BLOCK_SIZE = 4096
TOMBSTONE_LEN = 0xFFFFFFFF
MANIFEST_NAME = "MANIFEST"
MANIFEST_VERSION = 1

_FILE_HEADER = struct.Struct("<4sI")
_ENTRY_HEADER = struct.Struct("<IIQ")
_FENCE_KEYLEN = struct.Struct("<I")
_FENCE_TAIL = struct.Struct("<QI")
_FOOTER = struct.Struct("<QQI4s")
_OFFSETS = struct.Struct("<QQ")
_CRC = struct.Struct("<I")

CRC_SIZE = _CRC.size
ENTRY_OVERHEAD = _ENTRY_HEADER.size


def max_entry_payload(block_size: int) -> int:
    """Largest key+value that still fits in one block."""
    return block_size - ENTRY_OVERHEAD - CRC_SIZE


class Entry(NamedTuple):
    key: bytes
    value: Optional[bytes]  # None is a tombstone
    seq: int

    @property
    def is_tombstone(self) -> bool:
        return self.value is None


_new_entry = tuple.__new__


@dataclass(frozen=True)
class BloomSizing:
    """How a run's filter is sized from its entry count."""

    bits_per_key: float = 10.0
    k_hashes: int = 4
    hash_seed: int = 0

    def params_for(self, n: int) -> BloomParams:
        m = max(self.k_hashes, math.ceil(self.bits_per_key * n - 1e-9))
        return BloomParams(m, self.k_hashes, self.hash_seed)


@dataclass
class FencePointers:
    first_keys: list[bytes] = field(default_factory=list)
    offsets: list[int] = field(default_factory=list)
    lengths: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.first_keys)

    def locate(self, key: bytes) -> int:
        """Index of the only block that can hold ``key``, or -1."""
        return bisect_right(self.first_keys, key) - 1

    def to_bytes(self) -> bytes:
        parts = [_FENCE_KEYLEN.pack(len(self.first_keys))]
        for key, off, ln in zip(self.first_keys, self.offsets, self.lengths):
            parts.append(_FENCE_KEYLEN.pack(len(key)))
            parts.append(key)
            parts.append(_FENCE_TAIL.pack(off, ln))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int) -> "FencePointers":
        (count,) = _FENCE_KEYLEN.unpack_from(buf, offset)
        pos = offset + _FENCE_KEYLEN.size
        fence = cls()
        for _ in range(count):
            (kl,) = _FENCE_KEYLEN.unpack_from(buf, pos)
            pos += _FENCE_KEYLEN.size
            fence.first_keys.append(bytes(buf[pos:pos + kl]))
            pos += kl
            off, ln = _FENCE_TAIL.unpack_from(buf, pos)
            pos += _FENCE_TAIL.size
            fence.offsets.append(off)
            fence.lengths.append(ln)
        if any(b <= a for a, b in zip(fence.offsets, fence.offsets[1:])):
            raise CorruptRun("fence offsets are not increasing")
        return fence


@dataclass(eq=False)
class RunHandle:
    """An immutable on-disk run with its in-memory fence and filter."""

    level: int
    index_in_level: int
    path: str
    fence: FencePointers
    bloom: BloomState
    entry_count: int
    min_key: bytes
    max_key: bytes
    block_size: int = DEFAULT_BLOCK_SIZE
    _fd: Optional[int] = field(default=None, repr=False)

    @property
    def name(self) -> str:
        return os.path.basename(self.path)

    def read_block(self, i: int) -> bytes:
        if self._fd is None:
            try:
                self._fd = os.open(self.path, os.O_RDONLY)
            except OSError as exc:
                raise CorruptRun(f"{self.name}: {exc}") from None
        off, ln = self.fence.offsets[i], self.fence.lengths[i]
        block = os.pread(self._fd, ln, off)
        if len(block) != ln:
            raise CorruptRun(f"{self.name}: short read in block {i}")
        (crc,) = _CRC.unpack_from(block, ln - CRC_SIZE)
        if zlib.crc32(memoryview(block)[: ln - CRC_SIZE]) != crc:
            raise CorruptRun(f"{self.name}: checksum mismatch in block {i}")
        return block

    def close(self) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None

    def __del__(self) -> None:
        try:
            self.close()
        except Exception:
            pass


def _decode_block(block: bytes, out: list) -> None:
    end = len(block) - CRC_SIZE
    pos = 0
    unpack = _ENTRY_HEADER.unpack_from
    append = out.append
    while pos + ENTRY_OVERHEAD <= end:
        kl, vl, seq = unpack(block, pos)
        if kl == 0:
            break
        pos += ENTRY_OVERHEAD
        key = block[pos:pos + kl]
        pos += kl
        if vl == TOMBSTONE_LEN:
            value = None
        else:
            value = block[pos:pos + vl]
            pos += vl
        append(_new_entry(Entry, (key, value, seq)))


def _find_in_block(block: bytes, key: bytes) -> Optional[Entry]:
    end = len(block) - CRC_SIZE
    pos = 0
    unpack = _ENTRY_HEADER.unpack_from
    while pos + ENTRY_OVERHEAD <= end:
        kl, vl, seq = unpack(block, pos)
        if kl == 0:
            return None
        pos += ENTRY_OVERHEAD
        k = block[pos:pos + kl]
        pos += kl
        vlen = 0 if vl == TOMBSTONE_LEN else vl
        if k == key:
            return Entry(k, None if vl == TOMBSTONE_LEN else block[pos:pos + vlen], seq)
        if k > key:
            return None
        pos += vlen
    return None


def write_run(entries: Sequence[Entry], level: int, index: int, directory: str,
              sizing: BloomSizing, block_size: int = DEFAULT_BLOCK_SIZE,
              file_name: Optional[str] = None) -> RunHandle:
    """Write ``entries`` (sorted, unique keys) as a run file and return its handle."""
    if not entries:
        raise EmptyRun("refusing to write a run with no entries")
    limit = max_entry_payload(block_size)
    usable = block_size - CRC_SIZE
    pack = _ENTRY_HEADER.pack

    out = bytearray(_FILE_HEADER.pack(MAGIC, FORMAT_VERSION))
    fence = FencePointers()
    block = bytearray()
    prev = None

    def seal() -> None:
        block.extend(bytes(usable - len(block)))
        block.extend(_CRC.pack(zlib.crc32(block)))
        fence.offsets.append(len(out))
        fence.lengths.append(block_size)
        out.extend(block)
        block.clear()

    for key, value, seq in entries:
        if prev is not None and key <= prev:
            raise InvariantViolation("run entries must be strictly sorted by key")
        if not key:
            raise UsageError("empty keys are not storable")
        vlen = 0 if value is None else len(value)
        if len(key) + vlen > limit:
            raise UsageError(f"entry of {len(key) + vlen} bytes exceeds the {limit}-byte limit")
        prev = key
        size = ENTRY_OVERHEAD + len(key) + vlen
        if len(block) + size > usable:
            seal()
        if not block:
            fence.first_keys.append(bytes(key))
        if value is None:
            block += pack(len(key), TOMBSTONE_LEN, seq)
            block += key
        else:
            block += pack(len(key), vlen, seq)
            block += key
            block += value
    seal()

    bloom = BloomState(sizing.params_for(len(entries)))
    bloom.insert_many([e[0] for e in entries])
    bloom_off = len(out)
    out += bloom.to_bytes()
    fence_off = len(out)
    out += fence.to_bytes()
    offsets = _OFFSETS.pack(bloom_off, fence_off)
    out += _FOOTER.pack(bloom_off, fence_off, zlib.crc32(offsets), FOOTER_MAGIC)

    name = file_name or f"run-L{level}-{index}.sst"
    path = os.path.join(directory, name)
    with open(path, "wb") as fh:
        fh.write(out)
    return RunHandle(level, index, path, fence, bloom, len(entries),
                     bytes(entries[0][0]), bytes(entries[-1][0]), block_size)


def load_run(path: str, level: int, index: int, entry_count: Optional[int] = None,
             max_key: Optional[bytes] = None) -> RunHandle:
    """Open a run file, validating header and footer. Data blocks stay on disk."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CorruptRun(f"{os.path.basename(path)}: {exc}") from None
    name = os.path.basename(path)
    if len(raw) < _FILE_HEADER.size + _FOOTER.size:
        raise CorruptRun(f"{name}: file too short")
    magic, version = _FILE_HEADER.unpack_from(raw, 0)
    if magic != MAGIC or version != FORMAT_VERSION:
        raise CorruptRun(f"{name}: bad header")
    bloom_off, fence_off, crc, fmagic = _FOOTER.unpack_from(raw, len(raw) - _FOOTER.size)
    if fmagic != FOOTER_MAGIC or zlib.crc32(_OFFSETS.pack(bloom_off, fence_off)) != crc:
        raise CorruptRun(f"{name}: bad footer")
    if not _FILE_HEADER.size <= bloom_off < fence_off < len(raw) - _FOOTER.size:
        raise CorruptRun(f"{name}: footer offsets out of range")
    try:
        bloom, _ = BloomState.from_bytes(raw, bloom_off)
        fence = FencePointers.from_bytes(raw, fence_off)
    except (struct.error, ValueError) as exc:
        raise CorruptRun(f"{name}: {exc}") from None
    if not len(fence):
        raise CorruptRun(f"{name}: run has no blocks")
    block_size = fence.lengths[0]
    handle = RunHandle(level, index, path, fence, bloom, entry_count or 0,
                       fence.first_keys[0], max_key or b"", block_size)
    if entry_count is None or max_key is None:
        entries = scan_run(handle)
        handle.entry_count = len(entries)
        handle.max_key = entries[-1].key
    handle.bloom.n_inserted = handle.entry_count
    return handle


def read_point(handle: RunHandle, key: bytes) -> tuple[Optional[Entry], int]:
    """Look up ``key`` in one run. Returns ``(entry or None, pages_read)``."""
    if key < handle.min_key or key > handle.max_key:
        return None, 0
    i = handle.fence.locate(key)
    if i < 0:
        return None, 0
    return _find_in_block(handle.read_block(i), key), 1


def scan_run(handle: RunHandle) -> list[Entry]:
    out: list[Entry] = []
    for i in range(len(handle.fence)):
        _decode_block(handle.read_block(i), out)
    return out


def merge_runs(inputs: Sequence[RunHandle], drop_tombstones: bool) -> list[Entry]:
    """Merge runs ordered newest first; the newest entry per key wins."""
    return merge_entry_lists([scan_run(r) for r in inputs], drop_tombstones)


def merge_entry_lists(lists: Sequence[Sequence[Entry]], drop_tombstones: bool) -> list[Entry]:
    if len(lists) == 1:
        merged = list(lists[0])
    else:
        seen: dict[bytes, Entry] = {}
        for entries in lists:
            for e in entries:
                if e[0] not in seen:
                    seen[e[0]] = e
        # Insertion order is a concatenation of sorted runs; timsort merges it in near-linear time.
        merged = sorted(seen.values(), key=_entry_key)
    if drop_tombstones:
        merged = [e for e in merged if e[1] is not None]
    return merged


def _entry_key(e: Entry) -> bytes:
    return e[0]


def dump_run(path: str) -> dict:
    """Human-oriented summary of a run file (blocks, fence, filter stats)."""
    handle = load_run(path, 0, 0)
    try:
        blocks = []
        for i in range(len(handle.fence)):
            entries: list[Entry] = []
            _decode_block(handle.read_block(i), entries)
            blocks.append({
                "offset": handle.fence.offsets[i],
                "length": handle.fence.lengths[i],
                "first_key": handle.fence.first_keys[i].hex(),
                "entries": len(entries),
                "tombstones": sum(e.value is None for e in entries),
            })
        p = handle.bloom.params
        return {
            "file": handle.name,
            "entries": handle.entry_count,
            "min_key": handle.min_key.hex(),
            "max_key": handle.max_key.hex(),
            "block_size": handle.block_size,
            "blocks": blocks,
            "bloom": {"m_bits": p.m_bits, "k_hashes": p.k_hashes, "hash_seed": p.hash_seed,
                      "set_bits": handle.bloom.set_count,
                      "fill_fraction": handle.bloom.fill_fraction()},
        }
    finally:
        handle.close()


# Manifest --------------------------------------------------------------------

@dataclass
class Manifest:
    version: int = MANIFEST_VERSION
    levels: list[list[str]] = field(default_factory=list)
    next_sequence: int = 0
    next_file_id: int = 0
    params: dict = field(default_factory=dict)
    runs: dict[str, dict] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "version": self.version, "levels": self.levels,
            "next_sequence": self.next_sequence, "next_file_id": self.next_file_id,
            "params": self.params, "runs": self.runs,
        }, indent=1, sort_keys=True)


def manifest_path(directory: str) -> str:
    return os.path.join(directory, MANIFEST_NAME)


def write_manifest(directory: str, manifest: Manifest) -> None:
    """Atomic replace: write a temp file, fsync, rename."""
    path = manifest_path(directory)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(manifest.to_json())
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def read_manifest(directory: str) -> Optional[Manifest]:
    """Returns None for a directory that has never held a store."""
    path = manifest_path(directory)
    if not os.path.exists(path):
        return None
    try:
        with open(path) as fh:
            data = json.load(fh)
        m = Manifest(
            version=int(data["version"]),
            levels=[[str(n) for n in lvl] for lvl in data["levels"]],
            next_sequence=int(data["next_sequence"]),
            next_file_id=int(data.get("next_file_id", 0)),
            params=dict(data.get("params", {})),
            runs=dict(data.get("runs", {})),
        )
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise OpenFailed(f"unreadable manifest: {exc}") from None
    if m.version != MANIFEST_VERSION:
        raise OpenFailed(f"unsupported manifest version {m.version}")
    for level in m.levels:
        for name in level:
            if not os.path.exists(os.path.join(directory, name)):
                raise OpenFailed(f"manifest lists missing run file {name}")
    return m


def iter_live_files(manifest: Manifest) -> Iterable[str]:
    for level in manifest.levels:
        yield from level
