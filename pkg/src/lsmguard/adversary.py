"""Bloom-saturation attacks and the two false-positive security games.

Crafting is an offline brute-force search over 8-byte big-endian counter
keys. A candidate is accepted when it would set at least ``threshold``
still-unset bits of a shadow filter. The threshold starts at
``min(k, unset)``; once the candidate pool for the current threshold is
exhausted (``work_factor * m`` candidates, capped by ``max_candidates``)
the threshold drops by one and the pool is rescanned.

Games follow the usual two-phase shape: the adversary picks the inserted
set, the challenger builds the structure, the adversary gets a bounded
membership oracle and an unbounded state-reading oracle, then names a key.
It wins when that key is fresh (not inserted, not queried) and the
structure's filters accept it.
"""

from __future__ import annotations

import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
from scipy.stats import binomtest

from . import prp
from .bloom import (
    BloomParams,
    BloomState,
    bf_measure_fpr,
    bf_theoretical_fpr,
    position_matrix,
    positions,
    random_probe_keys,
)
from .errors import BudgetExhausted, UsageError
from .lsm import HardenedStore, LsmStore, PublicParams, lsm_new

KEY_WIDTH = 8


@dataclass(frozen=True)
class AttackBudget:
    max_candidates: int = 1 << 24
    rng_seed: int = 0
    work_factor: int = 1024

    def __post_init__(self) -> None:
        if self.max_candidates < 1 or self.work_factor < 1:
            raise UsageError("attack budget must be positive")


@dataclass
class CraftResult:
    keys: list[bytes]
    candidates_tried: int
    saturated: bool
    fill_fraction: float


# Counter i maps to the 8-byte big-endian value (start + i * STRIDE) mod 2^64.
# The odd stride makes this a bijection on counters while spreading consecutive
# candidates over the whole key space, so crafted runs are not confined to a
# narrow key range (which a run's min/max check would otherwise short-circuit).
STRIDE = 0x9E3779B97F4A7C15
MASK64 = (1 << 64) - 1


def _stream_start(seed: int) -> int:
    # splitmix64 finaliser
    z = (seed * 0x9E3779B97F4A7C15 + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def counter_key(start: int, i: int) -> bytes:
    return ((start + i * STRIDE) & MASK64).to_bytes(KEY_WIDTH, "big")


def counter_keys(start: int, first: int, count: int) -> list[bytes]:
    """Candidate keys for counters ``first .. first+count-1`` of the stream at ``start``."""
    idx = np.arange(first, first + count, dtype=np.uint64)
    vals = np.uint64(start) + idx * np.uint64(STRIDE)  # wraps mod 2^64
    raw = vals.astype(">u8").tobytes()
    return [raw[i:i + KEY_WIDTH] for i in range(0, len(raw), KEY_WIDTH)]


def _first_occurrence(pos: np.ndarray) -> np.ndarray:
    first = np.ones(pos.shape, dtype=bool)
    for j in range(1, pos.shape[1]):
        first[:, j] = (pos[:, :j] != pos[:, j:j + 1]).all(axis=1)
    return first


def _candidate_positions(keys: Sequence[bytes], params: BloomParams) -> np.ndarray:
    from .bloom import hash_pairs
    a, b = hash_pairs(keys, params.hash_seed)
    return position_matrix(a, b, params.m_bits, params.k_hashes).astype(np.int32)


def craft_keys(params: BloomParams, budget: AttackBudget, initial_bits: Optional[np.ndarray] = None,
               max_keys: Optional[int] = None) -> CraftResult:
    """Greedy crafted-key search; stops at saturation or after ``max_keys`` keys.

    ``initial_bits`` (bool array of length m) seeds the shadow filter, e.g.
    with a live filter read through the state oracle.
    """
    m, k = params.m_bits, params.k_hashes
    bits = np.zeros(m, dtype=bool) if initial_bits is None else np.array(initial_bits, dtype=bool, copy=True)
    if bits.shape != (m,):
        raise UsageError("initial_bits must have length m_bits")
    unset = int(m - bits.sum())
    start = _stream_start(budget.rng_seed)
    limit = min(budget.max_candidates, budget.work_factor * m)
    base_batch = min(limit, max(1024, 16 * m // k), 1 << 20)

    pos_segments: list[np.ndarray] = []
    first_segments: list[np.ndarray] = []
    pool = 0
    accepted: list[bytes] = []

    def full(keys_done: int) -> bool:
        return max_keys is not None and keys_done >= max_keys

    def scan(seg_from: int, threshold: int) -> None:
        nonlocal unset
        base = 0
        for si, (pos, first) in enumerate(zip(pos_segments, first_segments)):
            if si < seg_from:
                base += len(pos)
                continue
            gains = ((~bits[pos]) & first).sum(axis=1)
            for r in np.flatnonzero(gains >= threshold):
                row = pos[r]
                new = {int(p) for p in row if not bits[p]}
                if len(new) < threshold:
                    continue
                bits[list(new)] = True
                unset -= len(new)
                accepted.append(counter_key(start, base + int(r)))
                if unset == 0 or full(len(accepted)):
                    return
            base += len(pos)

    threshold = min(k, unset)
    scanned_segments = 0
    while unset > 0 and not full(len(accepted)):
        if scanned_segments < len(pos_segments):
            scan(scanned_segments, threshold)
            scanned_segments = len(pos_segments)
            if 0 < unset < threshold:
                threshold = unset
                scanned_segments = 0
            continue
        if pool < limit:
            size = min(max(base_batch, pool), limit - pool)
            pos = _candidate_positions(counter_keys(start, pool, size), params)
            pos_segments.append(pos)
            first_segments.append(_first_occurrence(pos))
            pool += size
            continue
        if threshold > 1:
            threshold -= 1
            scanned_segments = 0
            continue
        break

    fill = 1.0 - unset / m
    return CraftResult(accepted, pool, unset == 0, fill)


def craft_saturating_keys(params: BloomParams, budget: AttackBudget,
                          initial_bits: Optional[np.ndarray] = None) -> list[bytes]:
    """Keys that drive a filter with ``params`` to all-ones.

    Raises ``BudgetExhausted`` (carrying the partial list) when the candidate
    cap binds first.
    """
    result = craft_keys(params, budget, initial_bits)
    if not result.saturated:
        raise BudgetExhausted(
            f"{result.candidates_tried} candidates left the filter {result.fill_fraction:.4f} full",
            keys=result.keys, candidates_tried=result.candidates_tried)
    return result.keys


def saturation_timing(m_values: Sequence[int], k: int, budget: AttackBudget,
                      seeds: Sequence[int] = (0,), hash_seed: int = 0) -> list[dict]:
    """Wall-clock cost of ``craft_saturating_keys`` per filter size."""
    rows = []
    for m in m_values:
        params = BloomParams(m, k, hash_seed)
        for seed in seeds:
            b = AttackBudget(budget.max_candidates, seed, budget.work_factor)
            t0 = time.perf_counter()
            res = craft_keys(params, b)
            rows.append({
                "m_bits": m, "k_hashes": k, "seed": seed,
                "seconds": time.perf_counter() - t0,
                "candidates_tried": res.candidates_tried,
                "keys": len(res.keys),
                "saturated": res.saturated,
                "ratio_to_bound": len(res.keys) / math.ceil(m / k),
            })
    return rows


# Oracles ----------------------------------------------------------------------

@dataclass(frozen=True)
class FilterSnapshot:
    m_bits: int
    k_hashes: int
    hash_seed: int
    bits: bytes

    @classmethod
    def of(cls, state: BloomState) -> "FilterSnapshot":
        p = state.params
        return cls(p.m_bits, p.k_hashes, p.hash_seed, bytes(state.bits))

    @property
    def params(self) -> BloomParams:
        return BloomParams(self.m_bits, self.k_hashes, self.hash_seed)

    def bit_vector(self) -> np.ndarray:
        raw = np.frombuffer(self.bits, dtype=np.uint8)
        return np.unpackbits(raw, bitorder="little")[: self.m_bits].astype(bool)


@dataclass(frozen=True)
class OracleView:
    """What the state oracle reveals: filter bit arrays and public parameters only."""

    filters: tuple[FilterSnapshot, ...]

    def to_bytes(self) -> bytes:
        parts = []
        for f in self.filters:
            parts.append(f.m_bits.to_bytes(4, "little") + f.k_hashes.to_bytes(4, "little")
                         + f.hash_seed.to_bytes(8, "little") + f.bits)
        return b"".join(parts)


class QueryBudgetExceeded(Exception):
    pass


class Oracles:
    """Challenger-side oracle pair handed to the adversary's query phase."""

    def __init__(self, positive: Callable[[bytes], bool], view: Callable[[], OracleView], t: int):
        self._positive = positive
        self._view = view
        self.t = t
        self.queries: list[bytes] = []

    def query(self, key: bytes) -> bool:
        if len(self.queries) >= self.t:
            raise QueryBudgetExceeded(f"more than {self.t} membership queries")
        self.queries.append(bytes(key))
        return self._positive(key)

    def read(self) -> OracleView:
        return self._view()


# Adversaries ----------------------------------------------------------------

@dataclass
class ChooseContext:
    n: int
    security_bits: int
    bloom_params: BloomParams  # filter the chosen set is expected to land in
    rng: np.random.Generator


class Adversary(Protocol):
    name: str

    def choose(self, ctx: ChooseContext) -> list[bytes]:
        """Keys to insert (exactly ``ctx.n`` distinct keys)."""

    def guess(self, chosen: Sequence[bytes], oracles: Oracles, rng: np.random.Generator) -> bytes:
        """The key claimed to be a fresh false positive."""


def _random_keys(rng: np.random.Generator, n: int) -> list[bytes]:
    # Disjoint from counter keys with overwhelming probability; all distinct.
    out: list[bytes] = []
    seen = set()
    while len(out) < n:
        raw = rng.integers(0, 256, size=(n, KEY_WIDTH), dtype=np.uint8).tobytes()
        for i in range(0, len(raw), KEY_WIDTH):
            x = raw[i:i + KEY_WIDTH]
            if x not in seen and len(out) < n:
                seen.add(x)
                out.append(x)
    return out


class MemberAdversary:
    """Answers with a key it inserted; Step 4 makes this a certain loss."""

    name = "member"

    def choose(self, ctx: ChooseContext) -> list[bytes]:
        return _random_keys(ctx.rng, ctx.n)

    def guess(self, chosen, oracles, rng):
        return chosen[0]


class RandomGuessAdversary:
    name = "random-guess"

    def choose(self, ctx: ChooseContext) -> list[bytes]:
        return _random_keys(ctx.rng, ctx.n)

    def guess(self, chosen, oracles, rng):
        return _random_keys(rng, 1)[0]


class OverBudgetAdversary:
    """Spends one query more than allowed."""

    name = "over-budget"

    def choose(self, ctx: ChooseContext) -> list[bytes]:
        return _random_keys(ctx.rng, ctx.n)

    def guess(self, chosen, oracles, rng):
        fresh = _random_keys(rng, oracles.t + 2)
        for key in fresh[: oracles.t + 1]:
            oracles.query(key)
        return fresh[-1]


class StateReadingAdversary:
    """Reads every filter, then brute-forces a non-member whose k positions are all set.

    With ``crafted=True`` the chosen set is a greedy maximal-coverage list for
    the filter it expects, which makes the later search cheaper.
    """

    def __init__(self, crafted: bool = False, search_limit: int = 1 << 22, batch: int = 4096):
        self.crafted = crafted
        self.search_limit = search_limit
        self.batch = batch
        self.name = "state-reading" + ("+crafted" if crafted else "")

    def choose(self, ctx: ChooseContext) -> list[bytes]:
        if not self.crafted:
            return _random_keys(ctx.rng, ctx.n)
        seed = int(ctx.rng.integers(0, 2**62))
        res = craft_keys(ctx.bloom_params, AttackBudget(rng_seed=seed, work_factor=64), max_keys=ctx.n)
        keys = res.keys
        if len(keys) < ctx.n:
            keys = keys + [x for x in _random_keys(ctx.rng, ctx.n) if x not in set(keys)][: ctx.n - len(keys)]
        return keys

    def guess(self, chosen, oracles, rng):
        view = oracles.read()
        excluded = set(chosen)
        start = int(rng.integers(0, 2**63)) * 2
        vectors = [(f.params, f.bit_vector()) for f in view.filters]
        done = 0
        from .bloom import hash_pairs
        while vectors and done < self.search_limit:
            keys = counter_keys(start, done, self.batch)
            done += self.batch
            for params, bits in vectors:
                a, b = hash_pairs(keys, params.hash_seed)
                hit = bits[position_matrix(a, b, params.m_bits, params.k_hashes)].all(axis=1)
                for r in np.flatnonzero(hit):
                    if keys[r] not in excluded:
                        return keys[r]
        return _random_keys(rng, 1)[0]


# Games -----------------------------------------------------------------------

@dataclass(frozen=True)
class GameConfig:
    n: int = 100
    t: int = 0
    security_bits: int = prp.SECURITY_BITS
    trials: int = 1000
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.n < 0 or self.t < 0 or self.trials < 0:
            raise UsageError("n, t and trials must be non-negative")


@dataclass
class Transcript:
    trial: int
    chosen: list
    queries: list[bytes]
    answer: Optional[bytes]
    forfeited: bool
    win: bool
    hygiene_ok: bool = True


@dataclass
class GameResult:
    game: str
    target: str
    adversary: str
    wins: int
    trials: int
    transcripts: list[Transcript] = field(default_factory=list)
    epsilon: float = float("nan")

    @property
    def win_rate(self) -> float:
        return self.wins / self.trials if self.trials else 0.0

    @property
    def hygiene_ok(self) -> bool:
        return all(t.hygiene_ok for t in self.transcripts)

    def confidence_interval(self, level: float = 0.95) -> tuple[float, float]:
        if not self.trials:
            return (0.0, 1.0)
        ci = binomtest(self.wins, self.trials).proportion_ci(confidence_level=level, method="wilson")
        return (float(ci.low), float(ci.high))

    def summary(self) -> dict:
        lo, hi = self.confidence_interval()
        return {"game": self.game, "target": self.target, "adversary": self.adversary,
                "wins": self.wins, "trials": self.trials, "win_rate": self.win_rate,
                "ci95": [lo, hi], "epsilon": self.epsilon,
                "forfeits": sum(t.forfeited for t in self.transcripts),
                "oracle_hygiene_ok": self.hygiene_ok}


def _trial_rngs(seed: int, trial: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent coin streams for the challenger and the adversary."""
    ss = np.random.SeedSequence([seed, trial])
    c, a = ss.spawn(2)
    return np.random.default_rng(c), np.random.default_rng(a)


def _challenger_key(rng: np.random.Generator) -> prp.PrpKey:
    return prp.prp_keygen(int(rng.integers(0, 2**63)))


def _check_target(target: str) -> bool:
    if target not in ("plain", "hardened"):
        raise UsageError("target must be 'plain' or 'hardened'")
    return target == "hardened"


def _validate_chosen(keys: Sequence[bytes], n: int, hardened: bool) -> None:
    if len(keys) != n or len(set(keys)) != n:
        raise UsageError(f"adversary must choose exactly {n} distinct keys")
    if hardened and any(len(x) > prp.MAX_RAW_KEY for x in keys):
        raise UsageError("hardened targets take keys of at most 15 bytes")


def _bloom_setup(params: BloomParams, chosen: Sequence[bytes], key: Optional[prp.PrpKey]) -> BloomState:
    state = BloomState(params)
    for x in chosen:
        state.insert(prp.permute_key(key, x) if key else x)
    return state


def _bloom_positive(state: BloomState, key: Optional[prp.PrpKey], x: bytes) -> bool:
    if key is not None:
        if len(x) > prp.MAX_RAW_KEY:
            return False  # outside the hardened filter's domain: never inserted, never accepted
        x = prp.permute_key(key, x)
    return state.query(x)


def _play(trial: int, chosen, oracles: Oracles, adversary: Adversary, adv_rng, inserted: set,
          positive: Callable[[bytes], bool], secret: Optional[bytes]) -> Transcript:
    hygiene = True
    original_view = oracles._view

    def checked_view() -> OracleView:
        nonlocal hygiene
        view = original_view()
        if secret is not None and secret in view.to_bytes():
            hygiene = False
        return view

    oracles._view = checked_view
    try:
        answer = adversary.guess(chosen, oracles, adv_rng)
    except QueryBudgetExceeded:
        return Transcript(trial, list(chosen), oracles.queries, None, True, False, hygiene)
    answer = bytes(answer)
    win = answer not in inserted and answer not in set(oracles.queries) and positive(answer)
    return Transcript(trial, list(chosen), oracles.queries, answer, False, win, hygiene)


def smash_bloom_game(adversary: Adversary, config: GameConfig, params: BloomParams,
                     target: str = "plain") -> GameResult:
    """Repeated false-positive game against a bare filter (plain or PRP-keyed)."""
    hardened = _check_target(target)
    result = GameResult("smash-bloom", target, adversary.name, 0, config.trials,
                        epsilon=bf_theoretical_fpr(params, config.n))
    for trial in range(config.trials):
        ch_rng, adv_rng = _trial_rngs(config.rng_seed, trial)
        ctx = ChooseContext(config.n, config.security_bits, params, adv_rng)
        chosen = [bytes(x) for x in adversary.choose(ctx)]
        _validate_chosen(chosen, config.n, hardened)
        key = _challenger_key(ch_rng) if hardened else None
        state = _bloom_setup(params, chosen, key)

        def positive(x: bytes, state=state, key=key) -> bool:
            return _bloom_positive(state, key, x)

        oracles = Oracles(positive, lambda state=state: OracleView((FilterSnapshot.of(state),)), config.t)
        tr = _play(trial, chosen, oracles, adversary, adv_rng, set(chosen), positive,
                   key.secret if key else None)
        result.transcripts.append(tr)
        result.wins += tr.win
    return result


def replay_bloom_trial(tr: Transcript, config: GameConfig, params: BloomParams, target: str) -> bool:
    """Independent re-evaluation of Step 4 for one transcript.

    Rebuilds the challenger state from its coins and checks membership by
    recomputing bit positions directly, not through the filter's query path.
    """
    hardened = _check_target(target)
    if tr.forfeited or tr.answer is None:
        return False
    ch_rng, _ = _trial_rngs(config.rng_seed, tr.trial)
    key = _challenger_key(ch_rng) if hardened else None
    ones: set[int] = set()
    for x in tr.chosen:
        ones.update(positions(prp.permute_key(key, x) if key else x, params))
    ans = tr.answer
    if ans in set(tr.chosen) or ans in set(tr.queries):
        return False
    if key is not None:
        if len(ans) > prp.MAX_RAW_KEY:
            return False
        ans = prp.permute_key(key, ans)
    return all(p in ones for p in positions(ans, params))


def smash_lsm_game(adversary: Adversary, config: GameConfig, store_params: PublicParams,
                   workdir: Optional[str] = None) -> GameResult:
    """Repeated false-positive game against a freshly built store per trial.

    The membership oracle answers whether any run filter accepts the key
    (after permutation for hardened stores). The state oracle returns every
    run filter. There is no insertion oracle during the query phase.
    """
    hardened = store_params.hardened
    target = "hardened" if hardened else "plain"
    sizing = store_params.sizing.params_for(config.n)
    result = GameResult("smash-lsm", target, adversary.name, 0, config.trials,
                        epsilon=bf_theoretical_fpr(sizing, config.n))
    with tempfile.TemporaryDirectory(dir=workdir) as root:
        for trial in range(config.trials):
            ch_rng, adv_rng = _trial_rngs(config.rng_seed, trial)
            ctx = ChooseContext(config.n, config.security_bits, sizing, adv_rng)
            chosen = adversary.choose(ctx)
            pairs = [(bytes(x), b"v") if isinstance(x, (bytes, bytearray)) else (bytes(x[0]), x[1])
                     for x in chosen]
            keys = [k for k, _ in pairs]
            _validate_chosen(keys, config.n, hardened)
            prp_key = _challenger_key(ch_rng) if hardened else None
            store = lsm_new(store_params, os.path.join(root, f"t{trial}"), prp_key)
            for k, v in pairs:
                if v is None:
                    store.delete(k)
                else:
                    store.put(k, v)

            def positive(x: bytes, store=store) -> bool:
                if hardened and len(x) > prp.MAX_RAW_KEY:
                    return False
                return store.any_filter_positive(x)

            def view(store=store) -> OracleView:
                return OracleView(tuple(FilterSnapshot.of(s) for s in store.filter_states()))

            oracles = Oracles(positive, view, config.t)
            tr = _play(trial, keys, oracles, adversary, adv_rng, set(keys), positive,
                       prp_key.secret if prp_key else None)
            result.transcripts.append(tr)
            result.wins += tr.win
            store.close()
    return result


def max_run_epsilon(store: LsmStore | HardenedStore) -> float:
    return max((bf_theoretical_fpr(r.bloom.params, r.entry_count) for r in store.runs()), default=0.0)


# Deleted insertions -------------------------------------------------------------

@dataclass
class ScenarioPhase:
    name: str
    runs: list[dict]
    zero_result_pages: float


@dataclass
class ScenarioReport:
    hardened: bool
    crafted_keys: int
    phases: list[ScenarioPhase]

    def max_fpr(self, phase: str) -> float:
        p = next(ph for ph in self.phases if ph.name == phase)
        return max((r["measured_fpr"] for r in p.runs), default=0.0)

    def to_dict(self) -> dict:
        return {"hardened": self.hardened, "crafted_keys": self.crafted_keys,
                "phases": [{"name": p.name, "runs": p.runs, "zero_result_pages": p.zero_result_pages}
                           for p in self.phases]}


def deleted_insertion_scenario(store_params: PublicParams, budget: AttackBudget,
                               directory: str, prp_key: Optional[prp.PrpKey] = None,
                               legit_flushes: Optional[int] = None, probes: int = 100_000,
                               lookups: int = 20_000) -> ScenarioReport:
    """Insert crafted keys, delete them all, then fully compact.

    Legitimate keys are loaded first so that the crafted run sits above a
    deeper level: tombstones then cannot be dropped at the next merge and the
    crafted key set survives (as tombstones) in a rebuilt filter. Run FPR is
    measured after each phase.
    """
    params = store_params
    cap = params.memtable_capacity
    if legit_flushes is None:
        legit_flushes = params.size_ratio + 1
    rng = np.random.default_rng(budget.rng_seed)
    store = lsm_new(params, directory, prp_key)
    hardened = isinstance(store, HardenedStore)

    legit = _random_keys(rng, legit_flushes * cap)
    for x in legit:
        store.put(x, b"legit")
    store.flush()

    # The crafted batch fills exactly one memtable, landing alone in level 1.
    target = params.sizing.params_for(cap)
    crafted = craft_keys(target, budget, max_keys=cap).keys
    if len(crafted) < cap:
        extra = counter_keys(_stream_start(budget.rng_seed + 1), 0, cap)
        have = set(crafted)
        crafted += [x for x in extra if x not in have][: cap - len(crafted)]

    phases = []

    def snapshot(name: str) -> None:
        runs = []
        for i, r in enumerate(store.runs()):
            runs.append({
                "level": r.level, "n": r.entry_count, "m_bits": r.bloom.params.m_bits,
                "fill_fraction": r.bloom.fill_fraction(),
                "measured_fpr": bf_measure_fpr(r.bloom, probes, budget.rng_seed + i),
                "theoretical_fpr": bf_theoretical_fpr(r.bloom.params, r.entry_count),
            })
        before = store.io.snapshot()
        for x in random_probe_keys(lookups, budget.rng_seed + 7, width=KEY_WIDTH):
            store.get(x)
        pages = (store.io.pages_read - before.pages_read) / lookups if lookups else 0.0
        phases.append(ScenarioPhase(name, runs, pages))

    for x in crafted:
        store.put(x, b"crafted")
    store.flush()
    snapshot("after-insert")
    for x in crafted:
        store.delete(x)
    store.flush()
    snapshot("after-delete")
    store.compact_all()
    snapshot("after-full-compaction")
    store.close()
    return ScenarioReport(hardened, len(crafted), phases)
