"""Leveled LSM store with per-run Bloom filters and I/O accounting.

Writes land in an in-memory memtable (level 0). A full memtable is merged
into the single level-1 run; any level holding more than
``memtable_capacity * size_ratio**i`` entries is merged into the next level.
Point reads probe the memtable, then every run in ascending level order,
consulting the run's filter before touching its one candidate block.

``HardenedStore`` wraps the engine and feeds it PRP images of the keys, so
the engine, its filters and its files never see a raw key.
"""

from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from typing import Iterator, Optional, Union

from . import prp
from .bloom import BloomState, bf_measure_fpr, bf_theoretical_fpr, hash_pair
from .errors import InvalidParams, LsmGuardError, OpenFailed, UsageError
from .storage import (
    DEFAULT_BLOCK_SIZE,
    BloomSizing,
    Entry,
    Manifest,
    RunHandle,
    load_run,
    max_entry_payload,
    merge_entry_lists,
    read_manifest,
    read_point,
    scan_run,
    write_manifest,
    write_run,
)

log = logging.getLogger(__name__)

MEMORY_PAGE_COST = 1.0
DISK_PAGE_COST = 1.0
ZERO_RESULT = "zero-result"


@dataclass(frozen=True)
class PublicParams:
    """Public store configuration. Never carries secret key material."""

    memtable_capacity: int = 4096
    size_ratio: int = 4
    bloom_bits_per_key: float = 10.0
    bloom_k: int = 4
    block_size: int = DEFAULT_BLOCK_SIZE
    hardened: bool = False
    security_bits: int = prp.SECURITY_BITS
    hash_seed: int = 0
    memtable_bytes: Optional[int] = None

    def __post_init__(self) -> None:
        if self.memtable_capacity < 1:
            raise InvalidParams("memtable_capacity must be positive")
        if self.size_ratio < 2:
            raise InvalidParams("size_ratio must be at least 2")
        if self.bloom_bits_per_key <= 0 or self.bloom_k < 1:
            raise InvalidParams("bloom sizing must be positive")
        if self.block_size < 64:
            raise InvalidParams("block_size too small")
        if self.hardened and self.security_bits != prp.SECURITY_BITS:
            raise InvalidParams(f"hardened stores use a {prp.SECURITY_BITS}-bit key")
        if self.memtable_bytes is not None and self.memtable_bytes < 1:
            raise InvalidParams("memtable_bytes must be positive")

    @property
    def sizing(self) -> BloomSizing:
        return BloomSizing(self.bloom_bits_per_key, self.bloom_k, self.hash_seed)

    def level_capacity(self, level: int) -> int:
        return self.memtable_capacity * self.size_ratio ** level

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PublicParams":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})

    def replace(self, **changes) -> "PublicParams":
        return dataclasses.replace(self, **changes)


@dataclass
class IoStats:
    memtable_probes: int = 0
    bf_probes: int = 0
    bf_false_positives: int = 0
    run_probes: int = 0
    pages_read: int = 0

    def snapshot(self) -> "IoStats":
        return dataclasses.replace(self)

    def since(self, earlier: "IoStats") -> "IoStats":
        return IoStats(*(getattr(self, f.name) - getattr(earlier, f.name)
                         for f in dataclasses.fields(self)))


@dataclass(frozen=True)
class ProbeRecord:
    run: str
    level: int
    bf_positive: bool
    pages_read: int


@dataclass
class GetTrace:
    probes: list[ProbeRecord] = field(default_factory=list)
    memtable_hit: bool = False
    outcome: str = ZERO_RESULT
    value: Optional[bytes] = None

    @property
    def pages_read(self) -> int:
        return sum(p.pages_read for p in self.probes)


@dataclass(frozen=True)
class RunStats:
    level: int
    index: int
    name: str
    n: int
    m_bits: int
    k_hashes: int
    fill_fraction: float
    measured_fpr: float
    theoretical_fpr: float


@dataclass
class StoreStats:
    io: IoStats
    runs: list[RunStats]
    memtable_entries: int

    @property
    def run_count(self) -> int:
        return len(self.runs)

    def to_dict(self) -> dict:
        return {"io": dataclasses.asdict(self.io),
                "runs": [dataclasses.asdict(r) for r in self.runs],
                "memtable_entries": self.memtable_entries}


Scenario = Union[str, tuple[int, int]]


class LsmStore:
    """The plain engine. Keys are opaque byte strings."""

    def __init__(self, directory: str, params: PublicParams, *, _manifest: Optional[Manifest] = None):
        self.directory = directory
        self.params = params
        self.memtable: dict[bytes, tuple[Optional[bytes], int]] = {}
        self._mem_bytes = 0
        self.levels: list[list[RunHandle]] = []
        self.next_sequence = 0
        self.io = IoStats()
        self._next_file_id = 0
        self._closed = False
        if _manifest is not None:
            self._load(_manifest)

    # construction ----------------------------------------------------------

    @classmethod
    def create(cls, directory: str, params: PublicParams) -> "LsmStore":
        os.makedirs(directory, exist_ok=True)
        if read_manifest(directory) is not None:
            raise UsageError(f"{directory} already holds a store")
        store = cls(directory, params)
        store._write_manifest()
        return store

    @classmethod
    def open(cls, directory: str, params: Optional[PublicParams] = None) -> "LsmStore":
        """Open an existing store, or create one when the directory has none."""
        manifest = read_manifest(directory) if os.path.isdir(directory) else None
        if manifest is None:
            return cls.create(directory, params or PublicParams())
        stored = PublicParams.from_dict(manifest.params) if manifest.params else (params or PublicParams())
        return cls(directory, stored, _manifest=manifest)

    def _load(self, manifest: Manifest) -> None:
        self.next_sequence = manifest.next_sequence
        self._next_file_id = manifest.next_file_id
        for li, names in enumerate(manifest.levels):
            level = []
            for xi, name in enumerate(names):
                meta = manifest.runs.get(name, {})
                max_key = bytes.fromhex(meta["max_key"]) if "max_key" in meta else None
                level.append(load_run(os.path.join(self.directory, name), li + 1, xi,
                                      meta.get("entries"), max_key))
            self.levels.append(level)

    # writes ------------------------------------------------------------------

    def _check_entry(self, key: bytes, value: Optional[bytes]) -> None:
        if not isinstance(key, (bytes, bytearray)) or not key:
            raise UsageError("keys must be non-empty bytes")
        size = len(key) + (0 if value is None else len(value))
        if size > max_entry_payload(self.params.block_size):
            raise UsageError("entry does not fit in one block")
        if self._closed:
            raise LsmGuardError("store is closed")

    def put(self, key: bytes, value: bytes) -> None:
        if not isinstance(value, (bytes, bytearray)):
            raise UsageError("values must be bytes")
        self._write(bytes(key), bytes(value))

    def delete(self, key: bytes) -> None:
        self._write(bytes(key), None)

    def _write(self, key: bytes, value: Optional[bytes]) -> None:
        self._check_entry(key, value)
        old = self.memtable.get(key)
        if old is not None:
            self._mem_bytes -= len(key) + len(old[0] or b"")
        self.memtable[key] = (value, self.next_sequence)
        self._mem_bytes += len(key) + len(value or b"")
        self.next_sequence += 1
        if self._memtable_full():
            self.flush()

    def _memtable_full(self) -> bool:
        if self.params.memtable_bytes is not None:
            return self._mem_bytes >= self.params.memtable_bytes
        return len(self.memtable) >= self.params.memtable_capacity

    def flush(self) -> None:
        """Sort the memtable into level 1, then cascade compactions."""
        if not self.memtable:
            return
        entries = [Entry(k, v, s) for k, (v, s) in sorted(self.memtable.items())]
        self.memtable = {}
        self._mem_bytes = 0
        obsolete: list[RunHandle] = []
        if not self.levels:
            self.levels.append([])
        inputs = [entries] + [scan_run(r) for r in self.levels[0]]
        obsolete.extend(self.levels[0])
        self.levels[0] = self._write_level(0, inputs)
        self._settle(obsolete)

    def _is_bottom(self, li: int) -> bool:
        return all(not lvl for lvl in self.levels[li + 1:])

    def _write_level(self, li: int, inputs: list[list[Entry]]) -> list[RunHandle]:
        merged = merge_entry_lists(inputs, drop_tombstones=self._is_bottom(li))
        if not merged:
            return []
        name = f"{self._next_file_id:06d}.sst"
        self._next_file_id += 1
        return [write_run(merged, li + 1, 0, self.directory, self.params.sizing,
                          self.params.block_size, file_name=name)]

    def _settle(self, obsolete: list[RunHandle]) -> None:
        li = 0
        while li < len(self.levels):
            level = self.levels[li]
            if len(level) > 1:
                obsolete.extend(level)
                self.levels[li] = level = self._write_level(li, [scan_run(r) for r in level])
            if sum(r.entry_count for r in level) > self.params.level_capacity(li + 1):
                if li + 1 == len(self.levels):
                    self.levels.append([])
                below = self.levels[li + 1]
                inputs = [scan_run(r) for r in level] + [scan_run(r) for r in below]
                obsolete.extend(level)
                obsolete.extend(below)
                self.levels[li] = []
                self.levels[li + 1] = self._write_level(li + 1, inputs)
            li += 1
        while self.levels and not self.levels[-1]:
            self.levels.pop()
        self._renumber()
        self._write_manifest()
        self._discard(obsolete)

    def compact_all(self) -> None:
        """Flush, then rewrite every run into a single bottom-level run.

        Tombstones are dropped, so filters are rebuilt from live keys only.
        """
        self.flush()
        if not self.levels:
            return
        runs = [r for level in self.levels for r in level]
        inputs = [scan_run(r) for r in runs]
        bottom = len(self.levels) - 1
        self.levels = [[] for _ in range(bottom)] + [[]]
        self.levels[bottom] = self._write_level(bottom, inputs)
        while self.levels and not self.levels[-1]:
            self.levels.pop()
        self._renumber()
        self._write_manifest()
        self._discard(runs)

    def _renumber(self) -> None:
        for li, level in enumerate(self.levels):
            for xi, run in enumerate(level):
                run.level, run.index_in_level = li + 1, xi

    def _discard(self, runs: list[RunHandle]) -> None:
        live = {id(r) for r in self.runs()}
        for run in runs:
            if id(run) in live:
                continue
            run.close()
            try:
                os.remove(run.path)
            except FileNotFoundError:
                pass

    def _write_manifest(self) -> None:
        manifest = Manifest(
            levels=[[r.name for r in level] for level in self.levels],
            next_sequence=self.next_sequence,
            next_file_id=self._next_file_id,
            params=self.params.to_dict(),
            runs={r.name: {"entries": r.entry_count, "max_key": r.max_key.hex()} for r in self.runs()},
        )
        write_manifest(self.directory, manifest)

    def save(self) -> None:
        self.flush()
        self._write_manifest()

    def close(self) -> None:
        if self._closed:
            return
        self.save()
        for run in self.runs():
            run.close()
        self._closed = True

    def __enter__(self) -> "LsmStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # reads -------------------------------------------------------------------

    def runs(self) -> Iterator[RunHandle]:
        """All runs in probe order."""
        for level in self.levels:
            yield from level

    @property
    def run_count(self) -> int:
        return sum(len(level) for level in self.levels)

    def get(self, key: bytes, trace: Optional[GetTrace] = None) -> Optional[bytes]:
        """Point lookup. ``None`` means zero-result (absent or deleted)."""
        io = self.io
        io.memtable_probes += 1
        hit = self.memtable.get(key)
        if hit is not None:
            if trace is not None:
                trace.memtable_hit = True
                trace.outcome = "found" if hit[0] is not None else ZERO_RESULT
                trace.value = hit[0]
            return hit[0]
        hashes: dict[int, tuple[int, int]] = {}
        for level in self.levels:
            for run in level:
                seed = run.bloom.params.hash_seed
                ab = hashes.get(seed)
                if ab is None:
                    ab = hashes[seed] = hash_pair(key, seed)
                io.bf_probes += 1
                if not run.bloom.query_hashed(*ab):
                    if trace is not None:
                        trace.probes.append(ProbeRecord(run.name, run.level, False, 0))
                    continue
                io.run_probes += 1
                entry, pages = read_point(run, key)
                io.pages_read += pages
                if trace is not None:
                    trace.probes.append(ProbeRecord(run.name, run.level, True, pages))
                if entry is None:
                    io.bf_false_positives += 1
                    continue
                if trace is not None:
                    trace.outcome = "found" if entry.value is not None else ZERO_RESULT
                    trace.value = entry.value
                return entry.value
        return None

    def get_traced(self, key: bytes) -> tuple[Optional[bytes], GetTrace]:
        trace = GetTrace()
        return self.get(key, trace), trace

    def any_filter_positive(self, key: bytes) -> bool:
        """True if some run's filter accepts ``key``; no I/O, no counters."""
        return any(run.bloom.query(key) for run in self.runs())

    def filter_states(self) -> list[BloomState]:
        """Copies of every run filter in probe order."""
        return [run.bloom.copy() for run in self.runs()]

    def visible_entries(self) -> dict[bytes, Entry]:
        """Newest entry per key across memtable and runs, tombstones included."""
        out: dict[bytes, Entry] = {k: Entry(k, v, s) for k, (v, s) in self.memtable.items()}
        for run in self.runs():
            for e in scan_run(run):
                out.setdefault(e.key, e)
        return out

    def all_entries(self) -> list[tuple[int, int, Entry]]:
        """Every stored entry with its location ``(level, index)``; level 0 is the memtable."""
        out = [(0, 0, Entry(k, v, s)) for k, (v, s) in self.memtable.items()]
        for run in self.runs():
            out.extend((run.level, run.index_in_level, e) for e in scan_run(run))
        return out

    def items(self) -> dict[bytes, bytes]:
        return {k: e.value for k, e in self.visible_entries().items() if e.value is not None}

    # cost model ----------------------------------------------------------------

    def cost_table(self) -> list[float]:
        """Per-probe cost by level: index 0 is the memtable."""
        return [MEMORY_PAGE_COST] + [DISK_PAGE_COST] * len(self.levels)

    def expected_probe_cost(self, scenario: Scenario = ZERO_RESULT, p_b=None) -> float:
        """Expected disk-page cost of a point lookup.

        ``scenario`` is ``"zero-result"`` or ``(level, index)`` naming the run
        holding the key's newest entry. ``p_b`` maps a run to its filter's
        false-positive probability; it defaults to the theoretical estimate
        for the run's size.
        """
        if p_b is None:
            p_b = _theoretical_p_b
        costs = self.cost_table()
        memory = costs[0]
        if scenario == ZERO_RESULT:
            total = sum(p_b(r) * costs[r.level] for r in self.runs())
            return memory * total
        level, index = scenario
        if not 1 <= level <= len(self.levels) or not 0 <= index < len(self.levels[level - 1]):
            raise UsageError(f"no run at level {level} index {index}")
        total = 0.0
        for li in range(level - 1):
            total += sum(p_b(r) * costs[r.level] for r in self.levels[li])
        same = self.levels[level - 1]
        total += sum(p_b(r) * costs[level] for r in same[:index])
        total += costs[level]
        return memory * total

    def stats(self, probes: int = 10_000, rng_seed: int = 0) -> StoreStats:
        runs = []
        for run in self.runs():
            p = run.bloom.params
            runs.append(RunStats(
                level=run.level, index=run.index_in_level, name=run.name, n=run.entry_count,
                m_bits=p.m_bits, k_hashes=p.k_hashes, fill_fraction=run.bloom.fill_fraction(),
                measured_fpr=bf_measure_fpr(run.bloom, probes, rng_seed) if probes else float("nan"),
                theoretical_fpr=bf_theoretical_fpr(p, run.entry_count),
            ))
        return StoreStats(self.io.snapshot(), runs, len(self.memtable))


def _theoretical_p_b(run: RunHandle) -> float:
    return bf_theoretical_fpr(run.bloom.params, run.entry_count)


class HardenedStore:
    """Store front-end that reads and writes ``F_key(raw_key)`` instead of ``raw_key``.

    Values pass through unchanged. Raw keys are limited to 15 bytes.
    """

    def __init__(self, inner: LsmStore, prp_key: prp.PrpKey):
        if not inner.params.hardened:
            raise InvalidParams("HardenedStore needs params.hardened=True")
        self.inner = inner
        self._key = prp_key

    @property
    def params(self) -> PublicParams:
        return self.inner.params

    @property
    def io(self) -> IoStats:
        return self.inner.io

    @property
    def directory(self) -> str:
        return self.inner.directory

    @property
    def run_count(self) -> int:
        return self.inner.run_count

    def put(self, key: bytes, value: bytes) -> None:
        self.inner.put(prp.permute_key(self._key, key), value)

    def delete(self, key: bytes) -> None:
        self.inner.delete(prp.permute_key(self._key, key))

    def get(self, key: bytes, trace: Optional[GetTrace] = None) -> Optional[bytes]:
        return self.inner.get(prp.permute_key(self._key, key), trace)

    def get_traced(self, key: bytes) -> tuple[Optional[bytes], GetTrace]:
        return self.inner.get_traced(prp.permute_key(self._key, key))

    def any_filter_positive(self, key: bytes) -> bool:
        return self.inner.any_filter_positive(prp.permute_key(self._key, key))

    def items(self) -> dict[bytes, bytes]:
        inner = self.inner.items()
        return {prp.unpermute_key(self._key, k): v for k, v in inner.items()}

    def visible_entries(self) -> dict[bytes, Entry]:
        out = {}
        for k, e in self.inner.visible_entries().items():
            raw = prp.unpermute_key(self._key, k)
            out[raw] = Entry(raw, e.value, e.seq)
        return out

    def __getattr__(self, name):
        # runs(), levels, filter_states(), stats(), flush(), compact_all(), ... operate on
        # permuted keys only, so delegating them leaks nothing.
        return getattr(self.inner, name)

    def close(self) -> None:
        self.inner.close()

    def __enter__(self) -> "HardenedStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


Store = Union[LsmStore, HardenedStore]


def lsm_new(params: PublicParams, directory: str, prp_key: Optional[prp.PrpKey] = None) -> Store:
    """Create an empty store. A hardened store without a key gets a fresh one
    (available as ``store.generated_key`` so the caller can report it)."""
    inner = LsmStore.create(directory, params)
    if not params.hardened:
        return inner
    generated = prp_key is None
    store = HardenedStore(inner, prp_key or prp.prp_keygen())
    if generated:
        store.generated_key = store._key
        log.warning("generated a new PRP key for hardened store at %s", directory)
    return store


def open_store(directory: str, params: Optional[PublicParams] = None,
               prp_key: Optional[prp.PrpKey] = None) -> Store:
    """Reopen a store from its manifest (or create it if absent)."""
    manifest = read_manifest(directory) if os.path.isdir(directory) else None
    if manifest is None:
        return lsm_new(params or PublicParams(), directory, prp_key)
    inner = LsmStore.open(directory)
    if inner.params.hardened:
        if prp_key is None:
            raise OpenFailed("hardened store needs its PRP key to reopen")
        return HardenedStore(inner, prp_key)
    return inner


def save_store(store: Store) -> None:
    store.save()
