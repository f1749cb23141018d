import json
import os

import pytest

from lsmguard.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out.strip(), err


def test_put_get_del(tmp_path, capsys):
    d = str(tmp_path / "db")
    assert run(capsys, "db", "put", "a", "1", "--dir", d)[:2] == (0, "OK")
    assert run(capsys, "--dir", d, "db", "get", "a")[:2] == (0, "1")
    assert run(capsys, "db", "del", "a", "--dir", d)[0] == 0
    assert run(capsys, "db", "get", "a", "--dir", d)[:2] == (0, "NOT_FOUND")


def test_hex_and_json(tmp_path, capsys):
    d = str(tmp_path / "db")
    run(capsys, "db", "put", "--hex", "00ff", "beef", "--dir", d)
    code, out, _ = run(capsys, "db", "get", "--hex", "00ff", "--dir", d, "--json")
    assert code == 0 and json.loads(out) == {"found": True, "value": "beef"}
    assert run(capsys, "db", "get", "--hex", "zz", "--dir", d)[0] == 1


def test_stats_and_compact(tmp_path, capsys):
    d = str(tmp_path / "db")
    for i in range(30):
        run(capsys, "db", "put", f"k{i}", "v", "--dir", d, "--memtable-cap", "8")
    code, out, _ = run(capsys, "db", "stats", "--probes", "200", "--dir", d)
    assert code == 0 and out.startswith("runs=")
    assert run(capsys, "db", "compact", "--dir", d)[0] == 0
    code, out, _ = run(capsys, "db", "stats", "--probes", "100", "--dir", d, "--json")
    stats = json.loads(out)
    assert len(stats["runs"]) == 1 and stats["runs"][0]["n"] == 30
    run_file = next(f for f in os.listdir(d) if f.endswith(".sst"))
    code, out, _ = run(capsys, "db", "dump-run", os.path.join(d, run_file))
    assert code == 0 and json.loads(out)["entries"] == 30


@pytest.mark.parametrize("argv", [
    ["db", "get", "a", "--bogus"],
    ["frobnicate"],
    ["db"],
    ["db", "get", "a"],  # no --dir
    ["attack", "saturate", "--m", "64"],
])
def test_usage_errors_exit_1(argv, capsys):
    assert run(capsys, *argv)[0] == 1


def test_runtime_error_exit_2(tmp_path, capsys):
    d = str(tmp_path / "h")
    code, _, err = run(capsys, "db", "put", "a", "1", "--dir", d, "--hardened", "--seed", "3")
    assert code == 0 and "generated PRP key" in err
    key_hex = err.strip().split()[-1]
    # reopening a hardened store without its key is a runtime failure
    assert run(capsys, "db", "get", "a", "--dir", d)[0] == 2
    assert run(capsys, "db", "get", "a", "--dir", d, "--prp-key-hex", key_hex)[:2] == (0, "1")


def test_config_file(tmp_path, capsys):
    d = tmp_path / "db"
    cfg = tmp_path / "lsm.conf"
    cfg.write_text(f"# settings\ndir = {d}\nmemtable_cap = 4\nbits-per-key = 6\n")
    for i in range(10):
        assert run(capsys, "--config", str(cfg), "db", "put", f"k{i}", "v")[0] == 0
    code, out, _ = run(capsys, "--config", str(cfg), "db", "stats", "--probes", "10", "--json")
    stats = json.loads(out)
    # every CLI call closes (and so flushes) the store; one L1 run of 10 keys at 6 bits per key
    assert [(r["n"], r["m_bits"]) for r in stats["runs"]] == [(10, 60)]
    bad = tmp_path / "bad.conf"
    bad.write_text("colour = red\n")
    assert run(capsys, "--config", str(bad), "db", "get", "a")[0] == 1


def test_attack_saturate(tmp_path, capsys):
    out_dir = tmp_path / "out"
    code, out, _ = run(capsys, "attack", "saturate", "--m", "1024", "--k", "4", "--out-dir", str(out_dir))
    summary = json.loads(out)
    assert code == 0 and summary["saturated"] and summary["fill_fraction"] == 1.0
    assert summary["keys"] <= 282
    lines = (out_dir / "crafted_keys.csv").read_text().splitlines()
    assert len(lines) == summary["keys"] + 1
    assert run(capsys, "attack", "saturate", "--m", "4096", "--k", "4", "--max-candidates", "5")[0] == 2


def test_attack_timing(capsys):
    code, out, _ = run(capsys, "attack", "timing", "--m-values", "64,128", "--seeds", "2")
    assert code == 0 and len(json.loads(out)["rows"]) == 4


def test_games(tmp_path, capsys):
    code, out, _ = run(capsys, "game", "smash-bloom", "--trials", "20", "--out-dir", str(tmp_path))
    assert code == 0 and json.loads(out)["wins"] == 20
    assert (tmp_path / "smash-bloom_trials.csv").exists()
    code, out, _ = run(capsys, "game", "smash-lsm", "--trials", "10", "--m", "1024", "--hardened", "--seed", "1")
    res = json.loads(out)
    assert code == 0 and res["trials"] == 10 and res["oracle_hygiene_ok"]


def test_scenario(tmp_path, capsys):
    code, out, _ = run(capsys, "scenario", "deleted-inserts", "--memtable-cap", "128", "--probes", "2000",
                       "--lookups", "500", "--out-dir", str(tmp_path))
    data = json.loads(out)
    assert code == 0 and [p["name"] for p in data["phases"]] == ["after-insert", "after-delete",
                                                                "after-full-compaction"]
    assert (tmp_path / "deleted_inserts.csv").exists()


def test_bench_custom(tmp_path, capsys):
    spec = tmp_path / "w.spec"
    spec.write_text("kind=uniform-insert count=500 seed=1\nkind=zero-result-lookup count=200 seed=2\n")
    out_dir = tmp_path / "out"
    code, out, _ = run(capsys, "bench", "custom", "--spec", str(spec), "--repeats", "2", "--memtable-cap", "64",
                       "--out-dir", str(out_dir))
    assert code == 0 and json.loads(out)["name"] == "custom"
    assert sorted(os.listdir(out_dir)) == ["custom.csv", "custom.dat", "custom.json"]
    assert len((out_dir / "custom.csv").read_text().splitlines()) == 1 + 2 * 2 * 6


def test_no_files_without_out_dir(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    run(capsys, "attack", "saturate", "--m", "64", "--k", "2")
    assert os.listdir(tmp_path) == []
