import csv
import json
import os
import subprocess
import sys

import jsonschema
import pytest

from certsteer import artifacts
from certsteer.artifacts import atomic_write_text, load_schema
from certsteer.cli import ROW_COLUMNS, main
from certsteer.controller import TRAJECTORY_COLUMNS


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for k in list(os.environ):
        if k.startswith("CERTSTEER_"):
            monkeypatch.delenv(k)


def run(tmp_path, *argv, name="out"):
    out = tmp_path / name
    code = main([*argv, "--out-dir", str(out)])
    return code, out


def test_certify_ok_and_deterministic(tmp_path, capsys):
    code, a = run(tmp_path, "certify", "--label", "Snow", "--seed", "3", name="a")
    assert code == 0
    rep = json.loads((a / "certificate.json").read_text())
    assert rep["predicted_label"] == "Snow" and rep["certified_radius"] > 0
    assert "radius" in capsys.readouterr().out
    code, b = run(tmp_path, "certify", "--label", "Snow", "--seed", "3", name="b")
    assert (a / "certificate.json").read_bytes() == (b / "certificate.json").read_bytes()
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["outputs"] == ["certificate.json"] and manifest["seed"] == 3


def test_certify_boundary_abstains(tmp_path):
    code, out = run(tmp_path, "certify", "--label", "Snow", "--position", "2.0")
    assert code == 2
    assert json.loads((out / "certificate.json").read_text())["abstain"] is True


def test_certify_regression(tmp_path):
    code, out = run(tmp_path, "certify", "--mode", "regression", "--label", "Heavy Rain", "--epsilon", "0.5")
    assert code == 0
    rep = json.loads((out / "certificate.json").read_text())
    assert rep["lower"] <= rep["median"] <= rep["upper"]


def test_bad_config_exit_1(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[smoothing]\nalpha = 2.0\n")
    code, _ = run(tmp_path, "certify", "--config", str(cfg))
    assert code == 1
    assert "smoothing.alpha" in capsys.readouterr().err
    cfg.write_text("[attack]\nepsilon = 'x'\n")
    assert run(tmp_path, "simulate", "--config", str(cfg))[0] == 1
    assert run(tmp_path, "certify", "--label", "Fog")[0] == 1
    assert run(tmp_path, "certify", "--features", "1,2")[0] == 1


def test_usage_error_exit_1(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["certify", "--seed", "not-a-number"])
    assert exc.value.code == 1


def test_env_and_flag_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv("CERTSTEER_SEED", "42")
    _, out = run(tmp_path, "certify", "--label", "Snow", name="env")
    assert json.loads((out / "certificate.json").read_text())["seed"] == 42
    _, out = run(tmp_path, "certify", "--label", "Snow", "--seed", "8", name="flag")
    assert json.loads((out / "certificate.json").read_text())["seed"] == 8


def read_trajectory(path):
    lines = path.read_text().splitlines()
    body = [l for l in lines if not l.startswith("#")]
    footer = dict(l[2:].split("=", 1) for l in lines if l.startswith("#"))
    return list(csv.reader(body)), footer


def test_simulate_trajectory(tmp_path):
    code, out = run(tmp_path, "simulate", "--interval", "20000,40000", "--true-c", "30000")
    assert code == 0
    rows, footer = read_trajectory(out / "trajectory.csv")
    assert tuple(rows[0]) == TRAJECTORY_COLUMNS and len(TRAJECTORY_COLUMNS) == 13
    assert all(len(r) == 13 for r in rows)
    assert footer["diverged"] == "false" and footer["below_threshold"] == "true"
    assert float(footer["final_abs_s1"]) < 1.75
    assert float(rows[-1][0]) == pytest.approx(10.0)


def test_simulate_blowup_truncates(tmp_path):
    cfg = tmp_path / "tight.toml"
    cfg.write_text("[controller]\nblowup_bound = 0.15\n")
    code, out = run(tmp_path, "simulate", "--config", str(cfg))
    assert code == 0
    rows, footer = read_trajectory(out / "trajectory.csv")
    assert footer["diverged"] == "true"
    assert float(rows[-1][0]) < 10.0


def test_attack_command(tmp_path):
    code, out = run(tmp_path, "attack", "--label", "Snow", "--objective", "STABILITY", "--epsilon", "12")
    assert code == 0
    rep = json.loads((out / "attack.json").read_text())
    assert rep["delta_norm"] <= 12 + 1e-9
    assert rep["label_before"] == "Snow" and rep["label_after"] == "Sunny"


def test_experiment_single_cell(tmp_path):
    cfg = tmp_path / "one.toml"
    cfg.write_text("[experiment]\ntrials = 2\nnoise_levels = [0.5]\nobjectives = ['STABILITY']\n"
                   "modes = ['CLASSIFICATION']\n")
    code, out = run(tmp_path, "experiment", "--config", str(cfg))
    assert code == 0
    doc = json.loads((out / "results.json").read_text())
    jsonschema.validate(doc, load_schema())
    with open(out / "results.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == ROW_COLUMNS and len(rows) == 2
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["outputs"]) == {"results.json", "results.csv"}
    assert main(["report", "--out-dir", str(out)]) == 0
    assert (out / "report.md").read_text().startswith("# Experiment summary")


def test_experiment_is_reproducible(tmp_path):
    cfg = tmp_path / "one.toml"
    cfg.write_text("[experiment]\ntrials = 1\nnoise_levels = [0.25]\nobjectives = ['EFFICIENCY']\n"
                   "modes = ['NONROBUST_REG']\n")
    _, a = run(tmp_path, "experiment", "--config", str(cfg), name="a")
    _, b = run(tmp_path, "experiment", "--config", str(cfg), name="b")
    assert (a / "results.json").read_bytes() == (b / "results.json").read_bytes()
    assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()


def test_report_without_results(tmp_path):
    assert main(["report", "--out-dir", str(tmp_path / "none")]) == 1


def test_atomic_write_leaves_old_file_on_failure(tmp_path, monkeypatch):
    target = tmp_path / "f.json"
    atomic_write_text(target, "old")

    def boom(*a, **k):
        raise OSError("disk gone")

    monkeypatch.setattr(artifacts.os, "replace", boom)
    with pytest.raises(OSError):
        atomic_write_text(target, "new")
    assert target.read_text() == "old"
    assert [p.name for p in tmp_path.iterdir()] == ["f.json"]


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "certsteer", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("certsteer ")
