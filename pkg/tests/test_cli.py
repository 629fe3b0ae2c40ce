import json
import subprocess
import sys

import jsonschema
import pytest

from llprot.cli import main
from llprot.harness import LOSSCHECK_SCHEMA


@pytest.fixture
def data(tmp_path):
    path = tmp_path / "d.csv"
    assert main(["gen", "--per-class", "15", "--dim", "3", "--out", str(path)]) == 0
    return path


def test_gen_bags_train_eval(tmp_path, data, capsys):
    bags = tmp_path / "b.jsonl"
    assert main(["bags", "--data", str(data), "--bag-size", "5", "--out", str(bags)]) == 0
    assert len(bags.read_text().splitlines()) == 1 + 9
    run = tmp_path / "run"
    assert main(["train", "--data", str(data), "--bag-size", "3", "--loss", "rot", "--epochs", "2",
                 "--alpha", "0.3", "--sinkhorn-iters", "10", "--hidden", "4", "--out", str(run)]) == 0
    assert (run / "history.csv").read_text().splitlines()[0] == "epoch,train_loss,test_accuracy,seconds"
    capsys.readouterr()
    assert main(["eval", "--data", str(data), "--model", str(run / "model.llpw")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert 0 <= report["accuracy"] <= 1 and len(report["confusion"]) == 3
    assert main(["train", "--data", str(data), "--bags", str(bags), "--epochs", "1",
                 "--out", str(tmp_path / "run2")]) == 0


def test_config_file_overrides_flags(tmp_path, data):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 2, "bag_size": 9}))
    run = tmp_path / "run"
    assert main(["train", "--data", str(data), "--epochs", "7", "--config", str(cfg), "--out", str(run)]) == 0
    assert len((run / "history.csv").read_text().splitlines()) == 3
    cfg.write_text(json.dumps({"no_such_option": 1}))
    assert main(["train", "--data", str(data), "--config", str(cfg), "--out", str(run)]) == 1


def test_sweep_command(tmp_path, data):
    out = tmp_path / "sw"
    assert main(["sweep", "--data", str(data), "--bag-sizes", "1,3", "--losses", "kl,rot",
                 "--epochs", "1", "--hidden", "3", "--out", str(out)]) == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[0] == "loss,bag_size,alpha,epsilon,seed,final_train_loss,test_accuracy,seconds"
    assert len(lines) == 5


def test_exit_codes(tmp_path, data):
    assert main(["train", "--data", str(tmp_path / "missing.csv")]) == 1
    assert main(["bags", "--data", str(data), "--bag-size", "0"]) == 1
    assert main(["train", "--data", str(data), "--lr", "-1"]) == 1
    assert main(["train", "--data", str(data), "--loss", "rot", "--epsilon", "1e-320",
                 "--epochs", "1", "--out", str(tmp_path / "r")]) == 2


def test_losscheck_command(tmp_path, capsys):
    out = tmp_path / "report.json"
    assert main(["losscheck", "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    jsonschema.validate(report, LOSSCHECK_SCHEMA)
    assert report["passed"]
    assert main(["losscheck", "--inject-fault", "tau_sign"]) == 3


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "llprot", "gen", "--per-class", "2", "--dim", "2",
                           "--out", str(tmp_path / "g.csv")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "g.csv").read_text().startswith("f0,f1,label\n")


def test_cli_outputs_are_reproducible(tmp_path, data):
    for name in ("a", "b"):
        assert main(["train", "--data", str(data), "--bag-size", "3", "--epochs", "2",
                     "--out", str(tmp_path / name)]) == 0
    for f in ("history.csv", "model.llpw"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
