import csv
import json

import pytest

from driftflow.cli import CONFIG_ALIASES, main


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_flow_run_layout(tmp_path):
    out = tmp_path / "a"
    assert main(["flow", "--drift", "mmd", "--dataset", "moons", "--n", "32", "--steps", "500", "--seed", "7", "--out", str(out)]) == 0
    rows = _rows(out / "metrics.csv")
    assert rows[0] == ["step", "energy_mmd2", "mean_drift_norm", "max_drift_norm", "diverged"]
    assert len(rows) == 502
    assert (out / "target.csv").exists() and (out / "snapshots" / "step_000500.csv").exists()
    assert len(list(out.glob("scatter_step_*.svg"))) == 3
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "ok" and man["seeds"]["master"] == 7
    assert all(len(f["sha256"]) == 64 for f in man["files"])


def test_bad_arguments_exit_2(capsys):
    assert main(["flow", "--drift", "bogus"]) == 2
    assert "sinkhorn_exact" in capsys.readouterr().err
    assert main(["flow", "--eta", "0"]) == 2
    assert main(["train", "--eta", "-1"]) == 2
    assert main(["flow", "--dataset", "nosuch"]) == 2


def test_verify_command(tmp_path, capsys):
    assert main(["verify", "--suite", "curl_toy", "--out", str(tmp_path)]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert [c["check"] for c in doc["checks"]] == ["curl_toy"] and doc["passed"]
    assert (tmp_path / "report.json").exists()
    assert main(["verify", "--suite", "nosuch"]) == 2
    assert "tweedie" in capsys.readouterr().err


def test_verify_all(capsys):
    assert main(["verify", "--suite", "all"]) == 0
    assert json.loads(capsys.readouterr().out)["passed"]


def test_sweep_grid(tmp_path):
    argv = ["sweep", "--drifts", "mmd,kl", "--taus", "0.2,0.5,1.0", "--datasets", "moons", "--seeds", "0,1",
            "--n", "32", "--steps", "10"]
    assert main(argv + ["--out", str(tmp_path / "a")]) == 0
    rows = _rows(tmp_path / "a" / "sweep.csv")
    assert rows[0] == ["drift", "tau", "dataset", "seed", "final_mmd2", "initial_mmd2", "diverged"]
    assert len(rows) == 13
    assert (tmp_path / "a" / "sweep_moons.svg").exists()
    assert main(argv + ["--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "sweep.csv").read_bytes() == (tmp_path / "b" / "sweep.csv").read_bytes()


def test_sweep_two_delta(tmp_path):
    assert main(["sweep", "--target", "two-delta", "--taus", "0.5,0.4,0.3,0.001", "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "two_delta.csv")
    assert rows[0] == ["tau", "eps", "v_kl", "v_sp", "ratio", "v_w2", "underflow"]
    assert [r[-1] for r in rows[1:]] == ["0", "0", "0", "1"]
    assert (tmp_path / "two_delta.svg").exists()


def test_train_short_run(tmp_path):
    out = tmp_path / "t"
    argv = ["train", "--drift", "sinkhorn-proxy", "--dataset", "circles", "--steps", "20", "--hidden", "16",
            "--blocks", "1", "--data-batch", "32", "--model-batch", "32", "--holdout", "64", "--eval-every", "10",
            "--out", str(out)]
    assert main(argv) == 0
    rows = _rows(out / "train_metrics.csv")
    assert rows[0] == ["step", "loss", "mmd2_holdout"] and rows[-1][0] == "20"
    assert {p.name for p in (out / "samples").iterdir()} == {f"step_{s:06d}.csv" for s in (0, 5, 10, 15, 20)}
    for name in ("holdout.csv", "checkpoint.json", "samples_grid.svg", "manifest.json"):
        assert (out / name).exists()


def test_train_tiny_tau_kl_does_not_crash(tmp_path):
    argv = ["train", "--drift", "kl", "--tau", "1e-9", "--steps", "5", "--hidden", "8", "--blocks", "1",
            "--data-batch", "16", "--model-batch", "16", "--holdout", "32", "--out", str(tmp_path)]
    assert main(argv) in (0, 3)
    assert (tmp_path / "manifest.json").exists()


def test_train_divergence_exit_3(tmp_path):
    argv = ["train", "--drift", "sw", "--eta", "1e300", "--lr", "1e300", "--steps", "10", "--hidden", "8", "--blocks", "1",
            "--data-batch", "16", "--model-batch", "16", "--holdout", "32", "--out", str(tmp_path)]
    assert main(argv) == 3
    assert json.loads((tmp_path / "manifest.json").read_text())["status"] == "diverged"


def test_toml_config_with_override(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('[drift]\nkind = "kl"\ntau = 0.7\n\n[flow]\nstep_size = 0.05\nn_steps = 12\nn = 16\n')
    out = tmp_path / "o"
    assert main(["flow", "--config", str(cfg), "--steps", "4", "--out", str(out)]) == 0
    args = json.loads((out / "manifest.json").read_text())["arguments"]
    assert args["drift"] == "kl" and args["tau"] == 0.7 and args["eta"] == 0.05 and args["steps"] == 4
    assert len(_rows(out / "metrics.csv")) == 6
    assert CONFIG_ALIASES["step_size"] == "eta"


def test_toml_unknown_key(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("bogus = 1\n")
    assert main(["flow", "--config", str(cfg)]) == 2


@pytest.mark.parametrize("name", ["moons", "two_delta_mixture"])
def test_datasets_command(tmp_path, name):
    assert main(["datasets", "--dataset", name, "--n", "50", "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / f"{name}.csv")
    assert len(rows) == 51
    assert (tmp_path / f"{name}.svg").exists()
