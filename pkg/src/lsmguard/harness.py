"""Workload generation and benchmark orchestration.

A workload is an ordered list of phases. Every repeat builds a fresh store,
runs the phases in order and closes/reopens the store between a mutating
phase and a following lookup phase, so lookups only see on-disk state.
Pages read per operation is the headline metric; per-op latency is kept for
ratio reporting.
"""

from __future__ import annotations

import csv
import json
import math
import os
import shlex
import statistics
import tempfile
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import prp
from .adversary import AttackBudget, craft_keys
from .bloom import bf_measure_fpr, bf_theoretical_fpr
from .errors import UsageError
from .lsm import PublicParams, Store, lsm_new, open_store

PHASE_KINDS = ("uniform-insert", "crafted-insert", "zero-result-lookup", "existing-lookup", "delete")
MUTATING = {"uniform-insert", "crafted-insert", "delete"}
LOOKUPS = {"zero-result-lookup", "existing-lookup"}
METRICS = ("ops", "p50_ns", "p95_ns", "p99_ns", "mean_pages", "run_count")
VALUE = b"v" * 16


@dataclass(frozen=True)
class Phase:
    """One workload step.

    For ``crafted-insert``, ``count`` is the number of crafted keys per
    targeted run (0 means: until that run's filter copy is saturated) and
    ``runs_fraction`` selects the leading share of live runs to target.
    """

    kind: str
    count: int
    batch_size: int = 1000
    rng_seed: int = 0
    runs_fraction: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in PHASE_KINDS:
            raise UsageError(f"unknown phase kind {self.kind!r}")
        if self.count < 0 or (self.count == 0 and self.kind != "crafted-insert"):
            raise UsageError("phase count must be positive")
        if self.batch_size < 1:
            raise UsageError("batch_size must be positive")
        if not 0.0 <= self.runs_fraction <= 1.0:
            raise UsageError("runs_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class WorkloadSpec:
    phases: tuple[Phase, ...] = ()
    key_width: int = 8

    def __post_init__(self) -> None:
        if not 1 <= self.key_width <= prp.MAX_RAW_KEY:
            raise UsageError(f"key_width must be in [1, {prp.MAX_RAW_KEY}]")

    @classmethod
    def parse(cls, text: str) -> "WorkloadSpec":
        """Parse the flat text format.

        Blank lines and ``#`` comments are ignored. A line with ``kind=...``
        is a phase; any other ``key=value`` line sets a workload option::

            key_width=8
            kind=uniform-insert count=100000 seed=1
            kind=zero-result-lookup count=5000 seed=2
        """
        phases = []
        options: dict[str, str] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            tokens = shlex.split(line, comments=True)
            if not tokens:
                continue
            fields = {}
            for tok in tokens:
                if "=" not in tok:
                    raise UsageError(f"line {lineno}: expected key=value, got {tok!r}")
                k, v = tok.split("=", 1)
                fields[k.strip().replace("-", "_")] = v.strip()
            if "kind" in fields:
                try:
                    phases.append(Phase(
                        kind=fields.pop("kind"),
                        count=int(fields.pop("count")),
                        batch_size=int(fields.pop("batch_size", 1000)),
                        rng_seed=int(fields.pop("seed", fields.pop("rng_seed", 0))),
                        runs_fraction=float(fields.pop("runs_fraction", 1.0)),
                    ))
                except KeyError as exc:
                    raise UsageError(f"line {lineno}: missing {exc.args[0]}") from None
                except ValueError as exc:
                    raise UsageError(f"line {lineno}: {exc}") from None
                if fields:
                    raise UsageError(f"line {lineno}: unknown phase fields {sorted(fields)}")
            else:
                options.update(fields)
        unknown = set(options) - {"key_width"}
        if unknown:
            raise UsageError(f"unknown workload options {sorted(unknown)}")
        return cls(tuple(phases), int(options.get("key_width", 8)))

    @classmethod
    def load(cls, path: str) -> "WorkloadSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read())


@dataclass
class PhaseResult:
    index: int
    kind: str
    repeat: int
    ops: int
    p50_ns: float
    p95_ns: float
    p99_ns: float
    mean_pages: float
    run_count: int
    runs: list[dict] = field(default_factory=list)
    memtable_at_start: int = 0

    def metric(self, name: str) -> float:
        return float(getattr(self, name))


@dataclass
class PhaseSummary:
    index: int
    kind: str
    median_pages: float
    std_pages: float
    median_p50_ns: float
    median_p95_ns: float
    median_p99_ns: float
    run_counts: list[int]


@dataclass
class BenchReport:
    name: str
    params: dict
    repeats: int
    results: list[PhaseResult] = field(default_factory=list)

    def by_phase(self, index: int) -> list[PhaseResult]:
        return [r for r in self.results if r.index == index]

    @property
    def phase_indices(self) -> list[int]:
        return sorted({r.index for r in self.results})

    def summary(self) -> list[PhaseSummary]:
        out = []
        for i in self.phase_indices:
            rows = self.by_phase(i)
            pages = [r.mean_pages for r in rows]
            out.append(PhaseSummary(
                i, rows[0].kind, statistics.median(pages),
                statistics.stdev(pages) if len(pages) > 1 else 0.0,
                statistics.median(r.p50_ns for r in rows),
                statistics.median(r.p95_ns for r in rows),
                statistics.median(r.p99_ns for r in rows),
                [r.run_count for r in rows],
            ))
        return out

    def lookup_summaries(self, kind: str = "zero-result-lookup") -> list[PhaseSummary]:
        return [s for s in self.summary() if s.kind == kind]

    def to_dict(self) -> dict:
        return {"name": self.name, "params": self.params, "repeats": self.repeats,
                "summary": [asdict(s) for s in self.summary()],
                "results": [asdict(r) for r in self.results]}


def _percentiles(latencies: np.ndarray) -> tuple[float, float, float]:
    if not len(latencies):
        return (0.0, 0.0, 0.0)
    p = np.percentile(latencies, [50, 95, 99])
    return float(p[0]), float(p[1]), float(p[2])


def _run_layout(store: Store, probes: int, seed: int) -> list[dict]:
    rows = []
    for i, run in enumerate(store.runs()):
        p = run.bloom.params
        rows.append({"level": run.level, "n": run.entry_count, "m_bits": p.m_bits,
                     "fill_fraction": run.bloom.fill_fraction(),
                     "measured_fpr": bf_measure_fpr(run.bloom, probes, seed + i) if probes else float("nan"),
                     "theoretical_fpr": bf_theoretical_fpr(p, run.entry_count)})
    return rows


class _Workload:
    """State carried across phases of one repeat: the store and a live-key oracle."""

    def __init__(self, store: Store, spec: WorkloadSpec, params: PublicParams,
                 directory: str, prp_key: Optional[prp.PrpKey]):
        self.store = store
        self.spec = spec
        self.params = params
        self.directory = directory
        self.prp_key = prp_key
        self.live: set[bytes] = set()
        self.live_list: list[bytes] = []
        self.dirty = False

    def reopen(self) -> None:
        self.store.close()
        self.store = open_store(self.directory, self.params, self.prp_key)
        self.dirty = False

    def _fresh_keys(self, rng: np.random.Generator, count: int) -> list[bytes]:
        w = self.spec.key_width
        out: list[bytes] = []
        seen: set[bytes] = set()
        while len(out) < count:
            need = count - len(out)
            raw = rng.integers(0, 256, size=(need, w), dtype=np.uint8).tobytes()
            for i in range(0, len(raw), w):
                x = raw[i:i + w]
                if x not in self.live and x not in seen:
                    seen.add(x)
                    out.append(x)
        return out

    def crafted_keys(self, phase: Phase, rng: np.random.Generator) -> list[bytes]:
        runs = list(self.store.runs())
        targets = runs[: math.ceil(phase.runs_fraction * len(runs))]
        keys: list[bytes] = []
        taken: set[bytes] = set()
        for run in targets:
            bits = run.bloom.bit_vector()  # state oracle read
            budget = AttackBudget(rng_seed=int(rng.integers(0, 2**62)), work_factor=64)
            res = craft_keys(run.bloom.params, budget, initial_bits=bits,
                             max_keys=phase.count or None)
            for x in res.keys:
                if x not in self.live and x not in taken:
                    taken.add(x)
                    keys.append(x)
        return keys

    def run_phase(self, index: int, phase: Phase, repeat: int, seed: int, layout_probes: int) -> PhaseResult:
        rng = np.random.default_rng(np.random.SeedSequence([seed, phase.rng_seed, index, repeat]))
        if phase.kind in LOOKUPS and self.dirty:
            self.reopen()
        store = self.store
        memtable_at_start = len(store.memtable)
        if phase.kind == "uniform-insert":
            keys = self._fresh_keys(rng, phase.count)
        elif phase.kind == "crafted-insert":
            keys = self.crafted_keys(phase, rng)
        elif phase.kind == "zero-result-lookup":
            keys = self._fresh_keys(rng, phase.count)
        else:
            if not self.live_list:
                raise UsageError(f"phase {index}: no live keys to {phase.kind}")
            idx = rng.integers(0, len(self.live_list), size=phase.count)
            if phase.kind == "delete":
                idx = np.unique(idx)
            keys = [self.live_list[i] for i in idx]

        lat = np.empty(len(keys), dtype=np.int64)
        before = store.io.pages_read
        clock = time.perf_counter_ns
        if phase.kind in ("uniform-insert", "crafted-insert"):
            put = store.put
            for i, x in enumerate(keys):
                t0 = clock()
                put(x, VALUE)
                lat[i] = clock() - t0
            self.live.update(keys)
            self.live_list.extend(keys)
        elif phase.kind == "delete":
            delete = store.delete
            for i, x in enumerate(keys):
                t0 = clock()
                delete(x)
                lat[i] = clock() - t0
            self.live.difference_update(keys)
            self.live_list = [x for x in self.live_list if x in self.live]
        else:
            get = store.get
            expect_found = phase.kind == "existing-lookup"
            for i, x in enumerate(keys):
                t0 = clock()
                v = get(x)
                lat[i] = clock() - t0
                if (v is not None) != expect_found:
                    raise AssertionError(f"{phase.kind}: unexpected result for key {x.hex()}")
        if phase.kind in MUTATING:
            self.dirty = True
        pages = (store.io.pages_read - before) / len(keys) if len(keys) else 0.0
        p50, p95, p99 = _percentiles(lat)
        layout = _run_layout(store, layout_probes, seed) if phase.kind in LOOKUPS else []
        return PhaseResult(index, phase.kind, repeat, len(keys), p50, p95, p99, pages, store.run_count, layout,
                           memtable_at_start)


def run_benchmark(spec: WorkloadSpec, params: PublicParams, repeats: int = 5, directory: Optional[str] = None,
                  prp_key: Optional[prp.PrpKey] = None, seed: int = 0, name: str = "custom",
                  layout_probes: int = 10_000) -> BenchReport:
    """Execute ``spec`` ``repeats`` times against fresh stores.

    Repeats use distinct derived RNG streams, so the per-phase standard
    deviation reflects workload variation, not only timer noise.
    """
    if repeats < 1:
        raise UsageError("repeats must be positive")
    report = BenchReport(name, params.to_dict(), repeats)
    if not spec.phases:
        return report
    with tempfile.TemporaryDirectory(prefix="bench-", dir=directory) as root:
        for rep in range(repeats):
            path = os.path.join(root, f"r{rep}")
            key = prp_key
            if params.hardened and key is None:
                key = prp.prp_keygen(seed * 1_000_003 + rep)
            work = _Workload(lsm_new(params, path, key), spec, params, path, key)
            try:
                for i, phase in enumerate(spec.phases):
                    report.results.append(work.run_phase(i, phase, rep, seed, layout_probes))
            finally:
                work.store.close()
    return report


# Canned suites -----------------------------------------------------------------

DESK_PARAMS = PublicParams(memtable_capacity=2048, size_ratio=4, bloom_bits_per_key=10.0, bloom_k=4)


def degradation_spec(n_keys: int = 1_000_000, lookups: int = 50_000, crafted_per_run: Optional[int] = None,
                     intensities: Sequence[float] = (1.0,), memtable_capacity: int = 2048) -> WorkloadSpec:
    """Uniform load, baseline zero-result lookups, then crafted inserts at each intensity."""
    per_run = memtable_capacity if crafted_per_run is None else crafted_per_run
    phases = [Phase("uniform-insert", n_keys, rng_seed=1), Phase("zero-result-lookup", lookups, rng_seed=2)]
    for j, f in enumerate(x for x in intensities if x > 0):
        phases.append(Phase("crafted-insert", per_run, rng_seed=10 + j, runs_fraction=f))
        phases.append(Phase("zero-result-lookup", lookups, rng_seed=20 + j))
    return WorkloadSpec(tuple(phases))


def degrade_suite(params: PublicParams = DESK_PARAMS, repeats: int = 5, seed: int = 0,
                  directory: Optional[str] = None, **spec_kwargs) -> BenchReport:
    spec_kwargs.setdefault("memtable_capacity", params.memtable_capacity)
    spec = degradation_spec(**spec_kwargs)
    name = "secure" if params.hardened else "degrade"
    return run_benchmark(spec, params, repeats, directory, seed=seed, name=name)


def secure_suite(params: PublicParams = DESK_PARAMS, repeats: int = 5, seed: int = 0,
                 directory: Optional[str] = None, **spec_kwargs) -> BenchReport:
    return degrade_suite(params.replace(hardened=True), repeats, seed, directory, **spec_kwargs)


def attack_effect(report: BenchReport) -> dict:
    """Baseline vs final zero-result pages, with the baseline's spread across repeats."""
    looks = report.lookup_summaries()
    if len(looks) < 2:
        raise UsageError("report needs a baseline and a post-attack lookup phase")
    pre, post = looks[0], looks[-1]
    return {"pre_pages": pre.median_pages, "pre_std": pre.std_pages,
            "post_pages": post.median_pages, "post_std": post.std_pages,
            "pre_run_counts": pre.run_counts, "post_run_counts": post.run_counts,
            "inflation": post.median_pages / pre.median_pages if pre.median_pages else float("inf"),
            "within_2sigma": abs(post.median_pages - pre.median_pages) <= 2 * pre.std_pages}


def fpr_sweep(bits_per_key: Sequence[float], n_keys: int = 100_000, lookups: int = 20_000,
              params: PublicParams = DESK_PARAMS, seed: int = 0, directory: Optional[str] = None) -> list[dict]:
    """Zero-result pages versus configured filter budget (lower bits/key = higher FPR)."""
    rows = []
    spec = WorkloadSpec((Phase("uniform-insert", n_keys, rng_seed=1), Phase("zero-result-lookup", lookups, rng_seed=2)))
    for bpk in bits_per_key:
        rep = run_benchmark(spec, params.replace(bloom_bits_per_key=bpk), 1, directory, seed=seed,
                            layout_probes=0)
        look = rep.lookup_summaries()[0]
        runs = rep.by_phase(1)[0].runs
        rows.append({"bits_per_key": bpk, "mean_pages": look.median_pages, "run_count": look.run_counts[0],
                     "theoretical_pages": sum(r["theoretical_fpr"] for r in runs)})
    return rows


def overhead_benchmark(params: PublicParams = DESK_PARAMS, n_keys: int = 100_000, lookups: int = 20_000,
                       repeats: int = 5, seed: int = 0, directory: Optional[str] = None) -> dict:
    """Plain vs hardened insert/lookup latency, plus a plain-vs-plain control.

    Pages read for existing-key lookups are reported split into the page
    holding the key (always one per lookup) and filter false positives.
    """
    spec = WorkloadSpec((Phase("uniform-insert", n_keys, rng_seed=1), Phase("existing-lookup", lookups, rng_seed=2)))
    plain = params.replace(hardened=False)
    variants = {
        "plain": run_benchmark(spec, plain, repeats, directory, seed=seed, name="plain", layout_probes=0),
        "plain_control": run_benchmark(spec, plain, repeats, directory, seed=seed, name="plain-control",
                                       layout_probes=0),
        "hardened": run_benchmark(spec, plain.replace(hardened=True), repeats, directory, seed=seed,
                                  name="hardened", layout_probes=0),
    }
    out: dict = {"n_keys": n_keys, "lookups": lookups, "repeats": repeats, "variants": {}}
    for name, rep in variants.items():
        ins, look = rep.summary()
        ins_p50 = [r.p50_ns for r in rep.by_phase(0)]
        look_p50 = [r.p50_ns for r in rep.by_phase(1)]
        out["variants"][name] = {
            "insert_p50_ns": ins.median_p50_ns, "insert_p50_std": statistics.stdev(ins_p50) if repeats > 1 else 0.0,
            "lookup_p50_ns": look.median_p50_ns, "lookup_p50_std": statistics.stdev(look_p50) if repeats > 1 else 0.0,
            "lookup_pages": look.median_pages, "run_counts": look.run_counts,
        }
    base, ctl, hard = (out["variants"][k] for k in ("plain", "plain_control", "hardened"))
    out["hardened_insert_overhead"] = hard["insert_p50_ns"] / base["insert_p50_ns"] - 1.0
    out["hardened_lookup_overhead"] = hard["lookup_p50_ns"] / base["lookup_p50_ns"] - 1.0
    out["control_lookup_delta_ns"] = ctl["lookup_p50_ns"] - base["lookup_p50_ns"]
    # noise of a difference of two independently measured medians
    noise = math.hypot(base["lookup_p50_std"], ctl["lookup_p50_std"])
    out["control_within_noise"] = abs(out["control_lookup_delta_ns"]) < 2 * max(noise, 1e-9)
    # The hit page is one per lookup in every variant; the rest are filter false positives,
    # whose expectation is the same sum of per-run rates for plain and hardened layouts.
    fp_rate = max(base["lookup_pages"] - 1.0, hard["lookup_pages"] - 1.0, 1e-4)
    tolerance = 4 * math.sqrt(2 * fp_rate / lookups)
    out["pages_parity"] = abs(hard["lookup_pages"] - base["lookup_pages"]) <= tolerance
    out["pages_parity_tolerance"] = tolerance
    return out


# Emission -----------------------------------------------------------------------

def emit_csv(report: BenchReport, path: str) -> int:
    """One row per (phase, repeat, metric). Returns the row count."""
    rows = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["suite", "phase", "kind", "repeat", "metric", "value"])
        for r in report.results:
            for m in METRICS:
                w.writerow([report.name, r.index, r.kind, r.repeat, m, repr(r.metric(m))])
                rows += 1
    return rows


def read_csv(path: str) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [dict(row, phase=int(row["phase"]), repeat=int(row["repeat"]), value=float(row["value"]))
                for row in csv.DictReader(fh)]


def plot_series(report: BenchReport) -> list[tuple[float, float]]:
    """(attack step, median zero-result pages); step 0 is the pre-attack baseline."""
    return [(float(i), s.median_pages) for i, s in enumerate(report.lookup_summaries())]


def emit_plot_data(report: BenchReport, path: str, series: Optional[Sequence[tuple[float, float]]] = None,
                   columns: tuple[str, str] = ("attack_step", "mean_pages")) -> None:
    """Whitespace-separated two-column file readable by gnuplot."""
    series = plot_series(report) if series is None else series
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {report.name}: {columns[0]} {columns[1]}\n")
        for x, y in series:
            fh.write(f"{x!r} {y!r}\n")


def emit_json(data: dict, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, default=str)
