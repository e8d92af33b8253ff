import subprocess
import sys

import numpy as np
import pytest

from bimba import cli
from bimba.core import make_rng, random_grid, read_tensor, write_tensor
from bimba.harness import BenchmarkRecord, read_bench_csv


def test_unknown_subcommand(capsys):
    assert cli.run(["frobnicate"]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_flag():
    assert cli.run(["info", "--nope"]) == 2


def test_seed_required():
    assert cli.run(["scan-check"]) == 2


def test_help_exits_zero(capsys):
    assert cli.run(["--help"]) == 0
    assert "scan-check" in capsys.readouterr().out


def test_scan_check(capsys):
    assert cli.run(["scan-check", "--seed", "7", "--instances", "10"]) == 0
    out = capsys.readouterr().out
    value = float(out.split("max_rel_deviation=")[1].split()[0])
    assert value <= 1e-10


def test_grad_check_detects_bad_step(capsys):
    assert cli.run(["grad-check", "--seed", "1", "--instances", "3"]) == 0
    assert cli.run(["grad-check", "--seed", "1", "--instances", "3", "--step", "0.3"]) == 1
    assert "check failed" in capsys.readouterr().err


def test_compress_64x40x40_grid(tmp_path, capsys):
    src, dst = tmp_path / "g.bmbt", tmp_path / "q.bmbt"
    write_tensor(random_grid(make_rng(0), 64, 40, 40, 2), src)
    code = cli.run(["compress", "--seed", "3", "--in", str(src), "--out", str(dst),
                    "--tf", "4", "--sf", "2", "--state-size", "2"])
    assert code == 0
    assert read_tensor(dst).shape == (16, 20, 20, 2)
    assert "102400 -> 6400" in capsys.readouterr().out


def test_compress_bad_file(tmp_path, capsys):
    src = tmp_path / "bad.bmbt"
    src.write_bytes(b"nonsense")
    assert cli.run(["compress", "--seed", "0", "--in", str(src), "--out", str(tmp_path / "o")]) == 2
    assert "error" in capsys.readouterr().err


def test_compress_missing_file(tmp_path):
    assert cli.run(["compress", "--seed", "0", "--in", str(tmp_path / "none"),
                    "--out", str(tmp_path / "o")]) == 2


def test_info(capsys):
    assert cli.run(["info", "--shape", "64,24,24", "--budget-bytes", str(2**30)]) == 0
    out = capsys.readouterr().out
    assert "16x12x12 = 2304 tokens" in out
    assert "L' = 11586" in out


def test_needle_small(tmp_path, capsys):
    path = tmp_path / "n.csv"
    assert cli.run(["needle", "--seed", "0", "--seeds", "1", "--samples", "40",
                    "--methods", "pool,append-uni", "--csv", str(path)]) == 0
    lines = path.read_text().splitlines()
    assert lines[0].startswith("method,seed,accuracy,pos_0")
    assert len(lines) == 3


def test_needle_unknown_method():
    assert cli.run(["needle", "--seed", "0", "--methods", "magic"]) == 2


def test_bench_small(tmp_path, capsys):
    path = tmp_path / "b.csv"
    assert cli.run(["bench", "--seed", "0", "--methods", "pool,attention", "--tokens", "1024",
                    "--csv", str(path)]) == 0
    recs = read_bench_csv(path)
    assert [r.method for r in recs] == ["attention", "pool"]


def test_bench_bad_tokens():
    assert cli.run(["bench", "--seed", "0", "--tokens", "1000"]) == 2


class TestSummary:
    def test_one_record(self, tmp_path):
        text = cli.emit_summary([BenchmarkRecord("pool", 1024, 0.5, 8)], tmp_path / "s.csv")
        assert len(text.splitlines()) == 2
        assert read_bench_csv(tmp_path / "s.csv") == [BenchmarkRecord("pool", 1024, 0.5, 8)]

    def test_order_independent_of_input(self):
        recs = [BenchmarkRecord(m, t, 1.0, 8) for m in ("pool", "attention") for t in (4, 2, 8)]
        shuffled = [recs[i] for i in make_rng(0).permutation(len(recs))]
        assert cli.emit_summary(recs) == cli.emit_summary(shuffled)
        body = [line.split()[:2] for line in cli.emit_summary(recs).splitlines()[1:]]
        assert body == [["attention", "2"], ["attention", "4"], ["attention", "8"],
                        ["pool", "2"], ["pool", "4"], ["pool", "8"]]

    def test_empty(self):
        with pytest.raises(ValueError):
            cli.emit_summary([])


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "bimba", "info"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "6400 tokens" in proc.stdout
