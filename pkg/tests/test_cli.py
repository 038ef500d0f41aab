import json
import subprocess
import sys

import numpy as np

from fedmspc.cli import bundled_simulate_config, main


def write_config(tmp_path, **overrides):
    cfg = bundled_simulate_config()
    cfg["dataset"] = {**cfg["dataset"], "m": 160}
    cfg["dataset"]["faults"] = [{"kind": "residual_spike", "count": 20}, {"kind": "cross_holder", "count": 20,
                                                                          "split_at": 8}]
    cfg.update(overrides)
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    return path


def batch_config(tmp_path):
    cfg = {
        "schema": "fedmspc-run-config-v1",
        "session_id": "batch",
        "dataset": {"source": "synthetic", "batch_shape": [40, 3, 6], "rank": 2, "seed": 1},
        "partition": {"time_counts": [3, 3]},
        "split": {"fractions": [0.8, 0.0, 0.2]},
        "model": {"eigenvalue_scaling": "covariance"},
    }
    path = tmp_path / "batch.json"
    path.write_text(json.dumps(cfg))
    return path


def test_simulate(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o"), "--diagnose", "2"]) == 0
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    rows = {r["scenario"]: r for r in report["scenarios"]}
    assert rows["Centralized"]["counts"] == rows["Federated"]["counts"]
    assert list((tmp_path / "o").glob("**/diagnosis_H1_*.csv"))


def test_fit_and_monitor(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "o"
    assert main(["fit", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "train_transcript.ndjson").exists()
    header = [f"x{j + 1}" for j in range(16)]
    samples = tmp_path / "s.csv"
    np.savetxt(samples, np.random.default_rng(0).standard_normal((3, 16)), delimiter=",",
               header=",".join(header), comments="")
    assert main(["monitor", "--config", str(cfg), "--out", str(out), "--input", str(samples)]) == 0
    lines = (out / "monitor.ndjson").read_text().splitlines()
    assert len(lines) == 3


def test_bad_config_exit_2(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"schema": "fedmspc-run-config-v1", "dataset": {"source": "synthetic"}, "bogus": 1}))
    assert main(["prepare", "--config", str(path), "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "bogus" in err or "rank" in err


def test_party_malformed_config(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    assert main(["party", "--config", str(path), "--role", "csp"]) == 2


def test_incomplete_out_of_range(tmp_path):
    cfg = batch_config(tmp_path)
    out = tmp_path / "o"
    assert main(["fit", "--config", str(cfg), "--out", str(out)]) == 0
    samples = tmp_path / "s.csv"
    np.savetxt(samples, np.zeros((1, 9)), delimiter=",", header=",".join(f"c{i}" for i in range(9)), comments="")
    assert main(["monitor", "--config", str(cfg), "--out", str(out), "--input", str(samples),
                 "--incomplete", "7"]) == 2
    assert main(["monitor", "--config", str(cfg), "--out", str(out), "--input", str(samples),
                 "--incomplete", "3"]) == 0


def test_entry_point_version():
    res = subprocess.run([sys.executable, "-m", "fedmspc.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip()
