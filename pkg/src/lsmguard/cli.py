"""Command-line front end: ``lsmguard {db,attack,game,scenario,bench} ...``.

Exit codes: 0 success (including a NOT_FOUND answer), 1 usage error,
2 runtime error. Diagnostics go to stderr; answers and summaries to stdout.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import tempfile
from dataclasses import dataclass
from typing import Optional, Sequence

from . import harness, prp
from .adversary import (
    AttackBudget,
    GameConfig,
    MemberAdversary,
    RandomGuessAdversary,
    StateReadingAdversary,
    craft_keys,
    deleted_insertion_scenario,
    saturation_timing,
    smash_bloom_game,
    smash_lsm_game,
)
from .bloom import BloomParams, BloomState
from .errors import LsmGuardError, UsageError
from .lsm import PublicParams, lsm_new, open_store
from .storage import dump_run, read_manifest

log = logging.getLogger("lsmguard")

# config-file key -> argparse dest
CONFIG_KEYS = {
    "dir": "dir", "bits_per_key": "bits_per_key", "k_hashes": "k_hashes", "size_ratio": "size_ratio",
    "memtable_cap": "memtable_cap", "block_size": "block_size", "hardened": "hardened",
    "prp_key_hex": "prp_key_hex", "seed": "seed", "out_dir": "out_dir",
}
PARAM_DEFAULTS = {"bits_per_key": 10.0, "k_hashes": 4, "size_ratio": 4, "memtable_cap": 4096,
                  "block_size": 4096, "hardened": False, "seed": None, "dir": None,
                  "prp_key_hex": None, "out_dir": None}
ADVERSARIES = {
    "state-reading": lambda: StateReadingAdversary(),
    "crafted": lambda: StateReadingAdversary(crafted=True),
    "member": MemberAdversary,
    "random": RandomGuessAdversary,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(message)


@dataclass
class CliConfig:
    dir: Optional[str]
    params: PublicParams
    prp_key: Optional[prp.PrpKey]
    out_dir: Optional[str]
    seed: Optional[int]
    json: bool


def read_config_file(path: str) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            k, v = (x.strip() for x in line.split("=", 1))
            k = k.replace("-", "_")
            if k not in CONFIG_KEYS:
                raise UsageError(f"{path}:{lineno}: unknown setting {k!r}")
            out[CONFIG_KEYS[k]] = v
    return out


def _coerce(name: str, value):
    if value is None:
        return None
    try:
        if name == "bits_per_key":
            return float(value)
        if name in ("k_hashes", "size_ratio", "memtable_cap", "block_size", "seed"):
            return int(value)
        if name == "hardened":
            if isinstance(value, bool):
                return value
            if str(value).lower() in ("1", "true", "yes", "on"):
                return True
            if str(value).lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
    except ValueError:
        raise UsageError(f"bad value for {name}: {value!r}") from None
    return value


def resolve_config(args: argparse.Namespace) -> CliConfig:
    merged = dict(PARAM_DEFAULTS)
    if args.config:
        merged.update(read_config_file(args.config))
    for name in PARAM_DEFAULTS:
        v = getattr(args, name, None)
        if v is not None:
            merged[name] = v
    merged = {k: _coerce(k, v) for k, v in merged.items()}
    params = PublicParams(
        memtable_capacity=merged["memtable_cap"], size_ratio=merged["size_ratio"],
        bloom_bits_per_key=merged["bits_per_key"], bloom_k=merged["k_hashes"],
        block_size=merged["block_size"], hardened=merged["hardened"],
    )
    key = prp.PrpKey.from_hex(merged["prp_key_hex"]) if merged["prp_key_hex"] else None
    return CliConfig(merged["dir"], params, key, merged["out_dir"], merged["seed"], args.json)


def _emit(cfg: CliConfig, data, text: Optional[str] = None) -> None:
    if cfg.json or text is None:
        print(json.dumps(data, sort_keys=True, default=str))
    else:
        print(text)


def _out_path(cfg: CliConfig, name: str) -> Optional[str]:
    if not cfg.out_dir:
        return None
    os.makedirs(cfg.out_dir, exist_ok=True)
    return os.path.join(cfg.out_dir, name)


def _scratch_root(cfg: CliConfig) -> Optional[str]:
    """Scratch stores live under --dir, else --out-dir, else the system temp dir."""
    root = cfg.dir or cfg.out_dir
    if root:
        os.makedirs(root, exist_ok=True)
    return root


def _write_rows(path: Optional[str], header: Sequence[str], rows) -> None:
    if path is None:
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _key_for_new_store(cfg: CliConfig) -> Optional[prp.PrpKey]:
    if not cfg.params.hardened or cfg.prp_key is not None:
        return cfg.prp_key
    key = prp.prp_keygen(cfg.seed)
    print(f"generated PRP key (store it; needed to reopen): {key.hex()}", file=sys.stderr)
    return key


# db ----------------------------------------------------------------------------

def _open_db(cfg: CliConfig):
    if not cfg.dir:
        raise UsageError("--dir is required for db commands")
    if os.path.isdir(cfg.dir) and read_manifest(cfg.dir) is not None:
        return open_store(cfg.dir, cfg.params, cfg.prp_key)
    return lsm_new(cfg.params, cfg.dir, _key_for_new_store(cfg))


def _enc(text: str, as_hex: bool) -> bytes:
    if as_hex:
        try:
            return bytes.fromhex(text)
        except ValueError:
            raise UsageError(f"not hex: {text!r}") from None
    return text.encode("utf-8")


def cmd_db(args, cfg: CliConfig) -> int:
    if args.db_cmd == "dump-run":
        _emit(cfg, dump_run(args.file))
        return 0
    with _open_db(cfg) as store:
        if args.db_cmd == "put":
            store.put(_enc(args.key, args.hex), _enc(args.value, args.hex))
            _emit(cfg, {"status": "OK"}, "OK")
        elif args.db_cmd == "del":
            store.delete(_enc(args.key, args.hex))
            _emit(cfg, {"status": "OK"}, "OK")
        elif args.db_cmd == "get":
            value = store.get(_enc(args.key, args.hex))
            if value is None:
                _emit(cfg, {"found": False}, "NOT_FOUND")
            else:
                shown = value.hex() if args.hex else value.decode("utf-8", "backslashreplace")
                _emit(cfg, {"found": True, "value": shown}, shown)
        elif args.db_cmd == "stats":
            stats = store.stats(probes=args.probes, rng_seed=cfg.seed or 0)
            data = stats.to_dict()
            lines = [f"runs={stats.run_count} memtable={stats.memtable_entries}"]
            for r in stats.runs:
                lines.append(f"L{r.level}.{r.index} n={r.n} m={r.m_bits} fill={r.fill_fraction:.4f} "
                             f"fpr={r.measured_fpr:.4f} theory={r.theoretical_fpr:.4f}")
            _emit(cfg, data, "\n".join(lines))
        elif args.db_cmd == "compact":
            store.compact_all()
            _emit(cfg, {"status": "OK", "runs": store.run_count}, "OK")
    return 0


# attack / game / scenario -------------------------------------------------------

def cmd_attack(args, cfg: CliConfig) -> int:
    seed = cfg.seed or 0
    budget = AttackBudget(max_candidates=args.max_candidates, rng_seed=seed)
    if args.attack_cmd == "saturate":
        params = BloomParams(args.m, args.k)
        res = craft_keys(params, budget)
        state = BloomState(params)
        for x in res.keys:
            state.insert(x)
        _write_rows(_out_path(cfg, "crafted_keys.csv"), ["key_hex"], [[x.hex()] for x in res.keys])
        summary = {"m_bits": args.m, "k_hashes": args.k, "keys": len(res.keys),
                   "candidates_tried": res.candidates_tried, "saturated": res.saturated,
                   "fill_fraction": state.fill_fraction()}
        _emit(cfg, summary)
        if not res.saturated:
            print(f"budget exhausted after {res.candidates_tried} candidates", file=sys.stderr)
            return 2
        return 0
    rows = saturation_timing(args.m_values, args.k, budget, seeds=range(seed, seed + args.seeds))
    _write_rows(_out_path(cfg, "saturation_timing.csv"), list(rows[0]) if rows else [],
                [list(r.values()) for r in rows])
    _emit(cfg, {"rows": rows})
    return 0


def cmd_game(args, cfg: CliConfig) -> int:
    adversary = ADVERSARIES[args.adversary]()
    config = GameConfig(n=args.n, t=args.t, trials=args.trials, rng_seed=cfg.seed or 0)
    if args.game_cmd == "smash-bloom":
        target = "hardened" if cfg.params.hardened else "plain"
        result = smash_bloom_game(adversary, config, BloomParams(args.m, args.k), target)
    else:
        params = cfg.params
        if args.m is not None:
            params = params.replace(memtable_capacity=args.n, bloom_bits_per_key=args.m / args.n)
        with tempfile.TemporaryDirectory(dir=_scratch_root(cfg)) as scratch:
            result = smash_lsm_game(adversary, config, params, scratch)
    _write_rows(_out_path(cfg, f"{args.game_cmd}_trials.csv"),
                ["trial", "win", "forfeited", "queries", "answer_hex"],
                [[t.trial, int(t.win), int(t.forfeited), len(t.queries), t.answer.hex() if t.answer else ""]
                 for t in result.transcripts])
    _emit(cfg, result.summary())
    return 0


def cmd_scenario(args, cfg: CliConfig) -> int:
    params = cfg.params.replace(bloom_bits_per_key=args.bits_per_key_override or cfg.params.bloom_bits_per_key)
    budget = AttackBudget(rng_seed=cfg.seed or 0)
    key = prp.prp_keygen(cfg.seed) if params.hardened and cfg.prp_key is None else cfg.prp_key
    with tempfile.TemporaryDirectory(dir=_scratch_root(cfg)) as scratch:
        report = deleted_insertion_scenario(params, budget, os.path.join(scratch, "store"), key,
                                            probes=args.probes, lookups=args.lookups)
    rows = [[ph.name, r["level"], r["n"], r["m_bits"], r["fill_fraction"], r["measured_fpr"], r["theoretical_fpr"]]
            for ph in report.phases for r in ph.runs]
    _write_rows(_out_path(cfg, "deleted_inserts.csv"),
                ["phase", "level", "n", "m_bits", "fill_fraction", "measured_fpr", "theoretical_fpr"], rows)
    _emit(cfg, report.to_dict())
    return 0


# bench ----------------------------------------------------------------------------

def _bench_outputs(cfg: CliConfig, report: harness.BenchReport, extra: Optional[dict] = None) -> dict:
    path = _out_path(cfg, f"{report.name}.csv")
    if path:
        harness.emit_csv(report, path)
        harness.emit_plot_data(report, _out_path(cfg, f"{report.name}.dat"))
    data = {"name": report.name, "summary": [s.__dict__ for s in report.summary()]}
    if extra:
        data.update(extra)
    if cfg.out_dir:
        harness.emit_json(data, _out_path(cfg, f"{report.name}.json"))
    return data


def cmd_bench(args, cfg: CliConfig) -> int:
    seed = cfg.seed or 0
    if args.bench_cmd in ("degrade", "secure"):
        params = cfg.params.replace(hardened=args.bench_cmd == "secure")
        intensities = tuple(float(x) for x in args.intensities.split(","))
        report = harness.degrade_suite(params, args.repeats, seed, _scratch_root(cfg), n_keys=args.keys,
                                       lookups=args.lookups, crafted_per_run=args.crafted_per_run,
                                       intensities=intensities)
        _emit(cfg, _bench_outputs(cfg, report, {"attack_effect": harness.attack_effect(report)}))
    elif args.bench_cmd == "overhead":
        data = harness.overhead_benchmark(cfg.params, args.keys, args.lookups, args.repeats, seed, _scratch_root(cfg))
        if cfg.out_dir:
            harness.emit_json(data, _out_path(cfg, "overhead.json"))
        _emit(cfg, data)
    else:
        spec = harness.WorkloadSpec.load(args.spec)
        report = harness.run_benchmark(spec, cfg.params, args.repeats, _scratch_root(cfg), cfg.prp_key, seed)
        _emit(cfg, _bench_outputs(cfg, report))
    return 0


# parser -----------------------------------------------------------------------------

def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    # Shared flags are accepted before or after any subcommand. SUPPRESS keeps a
    # subparser from overwriting a value given earlier on the command line.
    common = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    g = common.add_argument_group("store and run options")
    g.add_argument("--dir", help="store directory (db) or scratch directory (game, bench)")
    g.add_argument("--bits-per-key", type=float, dest="bits_per_key")
    g.add_argument("--k-hashes", type=int, dest="k_hashes")
    g.add_argument("--size-ratio", type=int, dest="size_ratio")
    g.add_argument("--memtable-cap", type=int, dest="memtable_cap")
    g.add_argument("--block-size", type=int, dest="block_size")
    g.add_argument("--hardened", action="store_const", const=True)
    g.add_argument("--prp-key-hex", dest="prp_key_hex", help="32 hex digits")
    g.add_argument("--seed", type=int, help="seeds every random stream, including generated PRP keys")
    g.add_argument("--out-dir", dest="out_dir", help="where CSV/JSON/plot files go")
    g.add_argument("--config", help="flat key=value file; flags override it")
    g.add_argument("--json", action="store_true", help="machine-readable output")
    g.add_argument("-v", "--verbose", action="count")

    p = _Parser(prog="lsmguard", description="LSM store with Bloom-filter attack and defence tooling",
                parents=[common])
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    db = sub.add_parser("db", help="store operations", parents=[common])
    dbs = db.add_subparsers(dest="db_cmd", required=True, parser_class=_Parser)
    for name, nargs in (("put", ("key", "value")), ("get", ("key",)), ("del", ("key",))):
        sp = dbs.add_parser(name, parents=[common])
        for a in nargs:
            sp.add_argument(a)
        sp.add_argument("--hex", action="store_true", help="key/value given as hex")
    st = dbs.add_parser("stats", parents=[common])
    st.add_argument("--probes", type=int, default=10_000, help="random probes per run for measured FPR")
    dbs.add_parser("compact", parents=[common], help="full compaction into one bottom run")
    dr = dbs.add_parser("dump-run", parents=[common])
    dr.add_argument("file")

    at = sub.add_parser("attack", help="crafted-key filter saturation", parents=[common])
    ats = at.add_subparsers(dest="attack_cmd", required=True, parser_class=_Parser)
    sat = ats.add_parser("saturate", parents=[common])
    sat.add_argument("--m", type=int, required=True)
    sat.add_argument("--k", type=int, required=True)
    sat.add_argument("--max-candidates", type=int, default=1 << 24)
    tim = ats.add_parser("timing", parents=[common])
    tim.add_argument("--m-values", type=_int_list, default=[256, 512, 1024, 2048, 4096])
    tim.add_argument("--k", type=int, default=4)
    tim.add_argument("--seeds", type=int, default=3)
    tim.add_argument("--max-candidates", type=int, default=1 << 24)

    gm = sub.add_parser("game", help="false-positive security games", parents=[common])
    gms = gm.add_subparsers(dest="game_cmd", required=True, parser_class=_Parser)
    for name in ("smash-lsm", "smash-bloom"):
        sp = gms.add_parser(name, parents=[common])
        sp.add_argument("--n", type=int, default=100)
        sp.add_argument("--t", type=int, default=0)
        sp.add_argument("--trials", type=int, default=1000)
        sp.add_argument("--adversary", choices=sorted(ADVERSARIES), default="state-reading")
        sp.add_argument("--m", type=int, default=1024 if name == "smash-bloom" else None,
                        help="filter bits (smash-lsm: single run of n keys with m bits)")
        sp.add_argument("--k", type=int, default=4)

    sc = sub.add_parser("scenario", help="attack scenarios", parents=[common])
    scs = sc.add_subparsers(dest="scenario_cmd", required=True, parser_class=_Parser)
    di = scs.add_parser("deleted-inserts", parents=[common])
    di.add_argument("--probes", type=int, default=100_000)
    di.add_argument("--lookups", type=int, default=20_000)
    di.add_argument("--scenario-bits-per-key", type=float, dest="bits_per_key_override", default=4.0,
                    help="filter budget for this scenario (default 4)")

    bn = sub.add_parser("bench", help="benchmarks", parents=[common])
    bns = bn.add_subparsers(dest="bench_cmd", required=True, parser_class=_Parser)
    for name in ("degrade", "secure", "overhead", "custom"):
        sp = bns.add_parser(name, parents=[common])
        sp.add_argument("--repeats", type=int, default=5)
        if name == "custom":
            sp.add_argument("--spec", required=True)
            continue
        sp.add_argument("--keys", type=int, default=1_000_000 if name != "overhead" else 100_000)
        sp.add_argument("--lookups", type=int, default=50_000 if name != "overhead" else 20_000)
        if name != "overhead":
            sp.add_argument("--crafted-per-run", type=int, default=None,
                            help="crafted keys per targeted run (0 = until its filter copy saturates)")
            sp.add_argument("--intensities", default="1.0", help="comma-separated run fractions to target")
    return p


HANDLERS = {"db": cmd_db, "attack": cmd_attack, "game": cmd_game, "scenario": cmd_scenario, "bench": cmd_bench}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        for name, default in (("json", False), ("verbose", 0), ("config", None), *PARAM_DEFAULTS.items()):
            if not hasattr(args, name):
                setattr(args, name, None if name in PARAM_DEFAULTS else default)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args)
        if args.cmd == "bench" and args.bench_cmd in ("degrade", "secure") and args.memtable_cap is None \
                and not (args.config and "memtable_cap" in read_config_file(args.config)):
            cfg.params = cfg.params.replace(memtable_capacity=harness.DESK_PARAMS.memtable_capacity)
        return HANDLERS[args.cmd](args, cfg)
    except UsageError as exc:
        print(f"lsmguard: error: {exc}", file=sys.stderr)
        return 1
    except (LsmGuardError, OSError) as exc:
        print(f"lsmguard: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
