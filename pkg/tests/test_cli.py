import json

import numpy as np
import pytest

from rcp.cli import main
from rcp.harness import load_csv


def run_cli(*argv):
    return main(list(argv))


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as exc:
        run_cli("gen-data", "--generator", "toy")
    assert exc.value.code == 1


def test_unknown_verb_exit_code():
    with pytest.raises(SystemExit) as exc:
        run_cli("frobnicate")
    assert exc.value.code == 1


def test_gen_split_calibrate_predict_evaluate(tmp_path, capsys):
    data = tmp_path / "toy.csv"
    assert run_cli("gen-data", "--generator", "toy", "--n", "2000", "--seed", "3", "--out", str(data)) == 0
    assert load_csv(data, 1, 1).n == 2000

    prefix = str(tmp_path / "toy")
    assert (
        run_cli(
            "split", "--data", str(data), "--p", "1", "--d", "1",
            "--cal-size", "600", "--train-frac", "0.7", "--seed", "1",
            "--out-prefix", prefix,
        )
        == 0
    )
    assert load_csv(prefix + ".cal.csv", 1, 1).n == 600

    model = tmp_path / "model.rcpm"
    assert (
        run_cli(
            "calibrate", "--data", prefix + ".cal.csv", "--train", prefix + ".train.csv",
            "--p", "1", "--d", "1", "--method", "rcp", "--score", "abs_residual",
            "--family", "additive", "--estimator", "constant",
            "--predictor", "constant_mean", "--alpha", "0.1",
            "--seed", "4", "--out", str(model),
        )
        == 0
    )
    assert model.exists()

    out = tmp_path / "members.csv"
    assert (
        run_cli(
            "predict", "--model", str(model), "--data", prefix + ".test.csv",
            "--p", "1", "--d", "1", "--out", str(out),
        )
        == 0
    )
    members = [int(v) for v in out.read_text().split()]
    test_n = load_csv(prefix + ".test.csv", 1, 1).n
    assert len(members) == test_n
    assert 0.8 < sum(members) / test_n <= 1.0

    assert (
        run_cli(
            "evaluate", "--model", str(model), "--data", prefix + ".test.csv",
            "--p", "1", "--d", "1", "--seed", "2",
        )
        == 0
    )
    captured = capsys.readouterr().out
    assert "coverage" in captured and "wsc" in captured


def test_predict_base_level(tmp_path, capsys):
    data = tmp_path / "toy.csv"
    run_cli("gen-data", "--generator", "toy", "--n", "500", "--seed", "5", "--out", str(data))
    model = tmp_path / "m.rcpm"
    run_cli(
        "calibrate", "--data", str(data), "--p", "1", "--d", "1",
        "--method", "scp", "--score", "abs_residual", "--predictor", "constant_mean",
        "--seed", "1", "--out", str(model),
    )
    capsys.readouterr()  # drain calibrate output
    assert (
        run_cli(
            "predict", "--model", str(model), "--data", str(data), "--p", "1", "--d", "1",
            "--base-level",
        )
        == 0
    )
    lines = capsys.readouterr().out.strip().splitlines()
    vals = {float(v) for v in lines}
    assert len(vals) == 1  # scp threshold is covariate-free


def test_bench_exit_codes(tmp_path):
    cfg = {
        "source": "toy",
        "n": 1200,
        "calibration_size": 300,
        "seed": 2,
        "replications": 1,
        "predictor": "oracle",
        "methods": [{"kind": "scp", "score": "abs_residual"}],
        "wsc_directions": 10,
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    report = tmp_path / "report.csv"
    assert run_cli("bench", "--config", str(cfg_path), "--out", str(report)) == 0
    assert report.exists()


def test_theory_check_verbs(capsys):
    assert run_cli("theory-check", "--check", "epsilon", "--seed", "1") == 0
    assert (
        run_cli("theory-check", "--check", "marginal", "--seed", "1", "--reps", "150") == 0
    )
    assert (
        run_cli(
            "theory-check", "--check", "table1", "--seed", "1", "--reps", "60",
        )
        == 0
    )
    out = capsys.readouterr().out
    assert "epsilon bound" in out and "marginal" in out and "omega" in out


def test_two_moons_generator(tmp_path):
    data = tmp_path / "moons.csv"
    assert (
        run_cli("gen-data", "--generator", "two_moons", "--n", "300", "--seed", "7", "--out", str(data))
        == 0
    )
    loaded = load_csv(data, 1, 2)
    assert loaded.d == 2
