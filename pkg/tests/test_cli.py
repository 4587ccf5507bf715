import csv

import pytest

from mmfedprompt.cli import main

FAST = ["--n-train", "160", "--n-test", "40", "--n-clients", "2", "--tau", "4", "--kappa", "1",
        "--e-srv", "1", "--t-grad", "2"]


def test_run_writes_one_row_per_round(tmp_path, capsys):
    code = main(["run", "--method", "fed-prime", "--train-scenario", "miss-both", "--eta", "0.7",
                 "--rounds", "3", "--seed", "1", "--out", str(tmp_path), *FAST])
    assert code == 0
    rows = list(csv.reader(open(tmp_path / "metrics.csv")))
    assert len(rows) == 1 + 3
    assert "round 3" in capsys.readouterr().out


def test_config_file_then_flags(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[run]\nrounds = 2\nseed = 4\n")
    assert main(["run", "--config", str(ini), "--seed", "5", "--out", str(tmp_path / "o"), *FAST]) == 0
    snap = (tmp_path / "o" / "config.ini").read_text()
    assert "rounds = 2" in snap and "seed = 5" in snap


@pytest.mark.parametrize("argv", [["run", "--no-such-flag", "1"], ["run", "--eta", "3"], ["run", "--rounds", "x"],
                                  ["run", "--config", "/nonexistent.ini"], ["frobnicate"], []])
def test_bad_invocations_exit_nonzero(argv, capsys):
    assert main(argv) != 0
    assert capsys.readouterr().err


def test_sweep_writes_one_file_per_cell(tmp_path):
    code = main(["sweep", "--etas", "0,0.5", "--methods", "fed-prime,fedavg-p", "--rounds", "1",
                 "--out", str(tmp_path), *FAST])
    assert code == 0
    assert len(list(tmp_path.glob("eta*/*/metrics.csv"))) == 4
    assert len(list(csv.reader(open(tmp_path / "summary.csv")))) == 5


def test_ablate_pool(tmp_path):
    assert main(["ablate-pool", "--taus", "4,6", "--rounds", "1", "--out", str(tmp_path), *FAST]) == 0
    assert sorted(p.name for p in tmp_path.glob("tau*")) == ["tau4", "tau6"]


def test_selftest_quick(capsys):
    assert main(["selftest", "--quick"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 3 and "FAIL" not in out
