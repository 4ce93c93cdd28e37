import json
import os

import numpy as np
import pytest
from scipy import stats

from advlab import data
from advlab.cli import main


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("train", "--synth", "gaussians", "--classes", 3, "--dim", 6, "--n-per-class", 400,
               "--epochs", 10, "--test-fraction", 0.5, "--out", d / "m") == 0
    return d


def test_help_lists_commands(capsys):
    assert run("--help") == 0
    out = capsys.readouterr().out
    for name in ("train", "attack", "poison", "fit-null", "detect", "scan-backdoor", "re-sim", "eval"):
        assert name in out
    assert run("eval", "--help") == 0
    out = capsys.readouterr().out
    assert all(n in out for n in ("roc", "sweep", "ccr"))


def test_unknown_command_is_usage_error():
    assert run("frobnicate", "--out", "x") == 2


def test_missing_input_file(tmp_path, capsys):
    missing = tmp_path / "nope.bin"
    assert run("attack", "--model", missing, "--data", missing, "--out", tmp_path / "o") == 2
    assert str(missing) in capsys.readouterr().err


def test_config_unknown_section_and_key(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nepochs = 3\n[tran]\nx = 1\n")
    assert run("train", "--config", bad, "--synth", "gaussians", "--out", tmp_path / "o") == 2
    assert "unknown section [tran]" in capsys.readouterr().err
    bad.write_text("[train]\nepoch = 3\n")
    assert run("train", "--config", bad, "--synth", "gaussians", "--out", tmp_path / "o") == 2
    bad.write_text("[detect]\nmethod = bogus\n")
    assert run("train", "--config", bad, "--synth", "gaussians", "--out", tmp_path / "o") == 2
    bad.write_text("[backdoor]\nkind = patch\ncolour = red\n")
    assert run("train", "--config", bad, "--synth", "gaussians", "--out", tmp_path / "o") == 2


def test_config_fills_required_options(tmp_path, trained):
    cfg = tmp_path / "c.ini"
    m = trained / "m"
    cfg.write_text(f"[attack]\nmodel = {m / 'model.bin'}\ndata = {m / 'test.bin'}\nkind = fgsm\n"
                   "eps = 0.2\nlimit = 20\n")
    assert run("attack", "--config", cfg, "--out", tmp_path / "a") == 0
    lines = (tmp_path / "a" / "attack.csv").read_text().splitlines()
    assert lines[0] == "sample,label,target,l2,linf,success,decision" and len(lines) == 21
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["options"]["kind"] == "fgsm" and man["options"]["eps"] == 0.2
    assert "config" in man["inputs"] or str(cfg) in man["inputs"]
    # command-line values override the file
    assert run("attack", "--config", cfg, "--eps", 0.05, "--out", tmp_path / "b") == 0
    assert json.loads((tmp_path / "b" / "manifest.json").read_text())["options"]["eps"] == 0.05


def test_rerun_is_byte_identical(tmp_path, trained):
    m = trained / "m"
    outs = []
    for name in ("r1", "r2"):
        assert run("fit-null", "--model", m / "model.bin", "--data", m / "train.bin",
                   "--components", "bic", "--out", tmp_path / name) == 0
        outs.append(json.loads((tmp_path / name / "manifest.json").read_text()))
    assert outs[0]["outputs"] == outs[1]["outputs"]
    assert outs[0]["config_hash"] == outs[1]["config_hash"]
    assert "time" not in json.dumps(outs[0]).lower()


def test_detect_false_positive_rate(tmp_path, trained):
    m = trained / "m"
    test = data.load_dataset(m / "test.bin")
    calib, held = data.split(test, 0.5, 7)
    data.save_dataset(tmp_path / "calib.bin", calib)
    data.save_dataset(tmp_path / "held.bin", held)
    assert run("fit-null", "--model", m / "model.bin", "--data", m / "train.bin", "--out", tmp_path / "n") == 0
    assert run("detect", "--model", m / "model.bin", "--null", tmp_path / "n" / "null.bin",
               "--data", tmp_path / "held.bin", "--calib", tmp_path / "calib.bin", "--fpr", 0.05,
               "--out", tmp_path / "d") == 0
    row = (tmp_path / "d" / "summary.csv").read_text().splitlines()[1].split(",")
    n, flagged = int(row[2]), int(row[3])
    lo, hi = stats.binom.ppf([0.001, 0.999], n, 0.05)
    assert lo <= flagged <= hi


def test_eval_roc_and_ccr(tmp_path, trained):
    m = trained / "m"
    assert run("attack", "--model", m / "model.bin", "--data", m / "test.bin", "--kind", "fgsm",
               "--eps", 0.3, "--limit", 100, "--out", tmp_path / "a") == 0
    assert run("fit-null", "--model", m / "model.bin", "--data", m / "train.bin", "--out", tmp_path / "n") == 0
    null = tmp_path / "n" / "null.bin"
    for name, src in (("sa", tmp_path / "a" / "adversarial.bin"), ("sc", m / "test.bin")):
        assert run("detect", "--model", m / "model.bin", "--null", null, "--data", src,
                   "--out", tmp_path / name) == 0
    assert run("eval", "roc", "--attack-scores", tmp_path / "sa" / "scores.csv",
               "--clean-scores", tmp_path / "sc" / "scores.csv", "--out", tmp_path / "roc") == 0
    roc = np.loadtxt(tmp_path / "roc" / "roc.csv", delimiter=",", comments="#", skiprows=2)
    assert roc[0, 1] == 0.0 and roc[-1, 1] == 1.0 and roc[-1, 2] == 1.0
    assert run("eval", "ccr", "--model", m / "model.bin", "--null", null, "--data", m / "test.bin",
               "--calib", m / "train.bin", "--out", tmp_path / "ccr") == 0
    lines = (tmp_path / "ccr" / "ccr.csv").read_text().splitlines()
    assert lines[0] == "fpr,threshold,passed,ccr" and len(lines) == 4


def test_re_sim_outputs(tmp_path, trained):
    m = trained / "m"
    assert run("re-sim", "--model", m / "model.bin", "--data", m / "test.bin", "--seed-size", 20,
               "--stages", 3, "--epochs", 2, "--out", tmp_path / "re") == 0
    rows = (tmp_path / "re" / "stages.csv").read_text().splitlines()
    assert rows[0] == "stage,crafted,new,agreement"
    assert [int(r.split(",")[1]) for r in rows[1:]] == [20, 20, 40, 80]


@pytest.mark.slow
def test_scan_exit_codes(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[train]\nsynth = images\nclasses = 8\nside = 8\nn-per-class = 400\n"
                   "variation = 0.04\nnoise = 0.01\nepochs = 20\n\n"
                   "[backdoor]\nkind = additive_global\nsource = 0\ntarget = 1\ncount = 160\n"
                   "epsilon = 0.03\npattern = chessboard\nshape = 1,8,8\n\n"
                   "[scan-backdoor]\nper-class = 100\n")
    retrain = tmp_path / "retrain.ini"
    retrain.write_text("[train]\nepochs = 20\n")
    c, p, b = tmp_path / "clean", tmp_path / "pois", tmp_path / "bd"
    assert run("train", "--config", ini, "--out", c) == 0
    assert run("poison", "--config", ini, "--data", c / "train.bin", "--test", c / "test.bin", "--out", p) == 0
    assert run("train", "--config", retrain, "--data", p / "poisoned.bin", "--test", c / "test.bin",
               "--out", b) == 0
    assert run("scan-backdoor", "--config", ini, "--model", b / "model.bin", "--data", c / "test.bin",
               "--out", tmp_path / "s1") == 1
    assert os.path.exists(tmp_path / "s1" / "pattern.bin")
    assert "pair: 0->1" in (tmp_path / "s1" / "report.txt").read_text()
    assert run("scan-backdoor", "--config", ini, "--model", c / "model.bin", "--data", c / "test.bin",
               "--out", tmp_path / "s2") == 0
    assert not os.path.exists(tmp_path / "s2" / "pattern.bin")
