import csv
import json

import pytest

import gpadapter.training as training
from gpadapter.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from gpadapter.kernel import GpParams
from gpadapter.training import HISTORY_FIELDS

SMALL = ["--d", "16", "--m", "32", "--k", "3", "--samples", "2", "--epochs", "1", "--mode", "exact"]


@pytest.fixture
def data(tmp_path):
    train, test = tmp_path / "train.jsonl", tmp_path / "test.jsonl"
    common = ["--n-points", "12", "--classes", "2", "--class-mode", "template", "--inv-length", "100"]
    assert main(["synth", "--n-series", "12", "--seed", "1", "--out", str(train)] + common) == EXIT_OK
    assert main(["synth", "--n-series", "6", "--seed", "2", "--out", str(test)] + common) == EXIT_OK
    return train, test


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_synth_and_subsample(tmp_path, data):
    train, _ = data
    out = tmp_path / "sub.jsonl"
    assert main(["subsample", str(train), "--fraction", "0.5", "--seed", "3", "--out", str(out)]) == EXIT_OK
    first = json.loads(out.read_text().splitlines()[1])
    assert len(first["times"]) == 6


def test_synth_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--n-series", "3", "--n-points", "5", "--out", str(tmp_path / name)]) == EXIT_OK
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_train_writes_outputs(tmp_path, data):
    train, test = data
    out = tmp_path / "run"
    code = main(["train", "--data", str(train), "--test", str(test), "--out", str(out), "--classifier", "mlp"] + SMALL)
    assert code == EXIT_OK
    rows = _rows(out / "history.csv")
    assert tuple(rows[0]) == HISTORY_FIELDS and len(rows) == 2
    echo = json.loads((out / "config.json").read_text())
    assert echo["classifier"] == "mlp" and echo["d"] == 16 and echo["mode"] == "exact"
    metrics = json.loads((out / "metrics.json").read_text())
    assert 0 <= metrics["accuracy"] <= 1
    evald = tmp_path / "eval.json"
    assert main(["eval", str(out / "artifacts.json"), str(test), "--out", str(evald)]) == EXIT_OK
    assert json.loads(evald.read_text()) == metrics


def test_config_file_and_flag_precedence(tmp_path, data):
    train, _ = data
    cfg = tmp_path / "c.toml"
    cfg.write_text(f'data = "{train}"\nd = 20\nclassifier = "mlp"\nhidden = 4\nepochs = 1\nmode = "exact"\n')
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--d", "12", "--out", str(out)]) == EXIT_OK
    echo = json.loads((out / "config.json").read_text())
    assert echo["d"] == 12 and echo["classifier"] == "mlp" and echo["hidden"] == 4
    js = tmp_path / "c.json"
    js.write_text(json.dumps({"data": str(train), "epochs": 1, "mode": "exact", "d": 10}))
    assert main(["train", "--config", str(js), "--out", str(tmp_path / "r2")]) == EXIT_OK
    assert json.loads((tmp_path / "r2" / "config.json").read_text())["d"] == 10


def test_training_is_reproducible(tmp_path, data):
    train, _ = data
    for name in ("a", "b"):
        assert main(["train", "--data", str(train), "--out", str(tmp_path / name)] + SMALL) == EXIT_OK
    assert (tmp_path / "a" / "history.csv").read_bytes() == (tmp_path / "b" / "history.csv").read_bytes()
    assert (tmp_path / "a" / "artifacts.json").read_bytes() == (tmp_path / "b" / "artifacts.json").read_bytes()


def test_grid_has_fourteen_cells(tmp_path, data):
    train, test = data
    out = tmp_path / "grid"
    args = ["train", "--grid", "--data", str(train), "--test", str(test), "--out", str(out)]
    args += ["--d", "32", "--epochs", "1", "--mode", "exact", "--samples", "2"]
    cfg = tmp_path / "g.json"
    cfg.write_text(json.dumps({"hidden": 4, "meg_features": 10}))
    assert main(args + ["--config", str(cfg)]) == EXIT_OK
    rows = _rows(out / "grid.csv")
    assert rows[0] == ["classifier", "framework", "regime", "test_accuracy", "best_val_accuracy"]
    cells = {tuple(r[:3]) for r in rows[1:]}
    assert len(cells) == 14
    assert ("meg", "imp", "end_to_end") in cells and ("convnet", "uac", "two_stage") in cells


def test_usage_errors(tmp_path, data, capsys):
    train, _ = data
    assert main([]) == EXIT_USAGE
    assert main(["train", "--out", str(tmp_path / "x")]) == EXIT_USAGE
    assert main(["train", "--data", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "y")]) == EXIT_USAGE
    assert not (tmp_path / "y").exists()
    bad = tmp_path / "bad.toml"
    bad.write_text("unknown_key = 3\n")
    assert main(["train", "--config", str(bad), "--data", str(train), "--out", str(tmp_path / "z")]) == EXIT_USAGE
    assert main(["train", "--data", str(train), "--classifier", "forest", "--out", str(tmp_path / "w")] + SMALL) == EXIT_USAGE
    assert main(["synth", "--n-series", "2", "--class-mode", "weird", "--out", str(tmp_path / "s")]) == EXIT_USAGE
    assert main(["subsample", str(train), "--fraction", "0.01", "--out", str(tmp_path / "t")]) == EXIT_USAGE
    assert "error" in capsys.readouterr().err


def test_numeric_failure_exit_code(tmp_path, monkeypatch):
    data = tmp_path / "dup.jsonl"
    # two observations a nanosecond apart with negligible noise give a singular gram matrix
    data.write_text(
        '{"T": 1.0, "classes": 2}\n'
        '{"times": [0.0, 1e-9], "values": [1.0, 1.0], "label": 0}\n'
        '{"times": [0.2, 0.6], "values": [1.0, -1.0], "label": 1}\n'
    )
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"lr": 0.0}))
    monkeypatch.setattr(training, "default_gp_params", lambda ds: GpParams(0.0, 0.0, -80.0))
    code = main(["train", "--data", str(data), "--config", str(cfg), "--out", str(tmp_path / "o"), "--framework", "imp"] + SMALL)
    assert code == EXIT_NUMERIC


def test_convert_and_import(tmp_path):
    (tmp_path / "a.csv").write_text("t,v\n0.0,1.0\n0.5,2.0\n")
    (tmp_path / "b.csv").write_text("0.2,3.0\n0.9,4.0\n")
    out = tmp_path / "conv.jsonl"
    assert main(["convert", f"{tmp_path / 'a.csv'}:0", f"{tmp_path / 'b.csv'}:1", "--out", str(out)]) == EXIT_OK
    header = json.loads(out.read_text().splitlines()[0])
    assert header == {"T": 0.9, "classes": 2}
    assert main(["convert", str(tmp_path / "a.csv"), "--out", str(out)]) == EXIT_USAGE
    (tmp_path / "u.tsv").write_text("1 0.1 0.2 0.3\n2 0.3 0.2 0.1\n")
    assert main(["import-ucr", str(tmp_path / "u.tsv"), "--out", str(tmp_path / "u.jsonl")]) == EXIT_OK


def test_approx_error_and_timing_csv(tmp_path):
    cfg = tmp_path / "a.json"
    cfg.write_text(json.dumps({"lengths": [60], "m_values": [32, 64], "k_values": [2, 4], "m_fixed": 32, "k_fixed": 4}))
    out = tmp_path / "a.csv"
    assert main(["approx-error", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    rows = _rows(out)
    assert rows[0] == ["sweep", "n", "m", "k", "error"] and len(rows) == 5
    again = tmp_path / "b.csv"
    assert main(["approx-error", "--config", str(cfg), "--out", str(again)]) == EXIT_OK
    assert out.read_bytes() == again.read_bytes()
    tcfg = tmp_path / "t.json"
    tcfg.write_text(json.dumps({"lengths": [50], "m": 32, "k": 3, "reps": 1}))
    tout = tmp_path / "t.csv"
    assert main(["timing", "--config", str(tcfg), "--out", str(tout)]) == EXIT_OK
    rows = _rows(tout)
    assert rows[0] == ["method", "n", "seconds"] and len(rows) == 5
    assert all(float(r[2]) > 0 for r in rows[1:])
