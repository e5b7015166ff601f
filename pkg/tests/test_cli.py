import csv
import json
import subprocess
import sys

import pytest

from arac.cli import main

SMALL = {"env": "deceptive_bandit2d", "M": 3, "K": 2, "G": 4, "n": 2, "R": 1, "hidden": 4,
         "critic_hidden": 4, "batch_size": 8, "flows": 1, "max_steps": 30, "eval_interval": 15}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL))
    return path


def test_train_then_eval(config, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(config), "--out-dir", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "train" and manifest["finished"]
    assert manifest["config"]["M"] == 3 and manifest["seed"] == 0
    assert (out / "metrics.csv").exists() and (out / "checkpoints" / "gen_9").is_dir()
    capsys.readouterr()
    assert main(["eval", str(out), "--episodes", "3"]) == 0
    rows = list(csv.reader(capsys.readouterr().out.splitlines()))
    assert rows[0] == ["agent_id", "mean_fitness", "std_fitness", "episodes"]
    assert [r[0] for r in rows[1:]] == ["0", "1", "2"]
    assert all(float(r[2]) == 0.0 and r[3] == "3" for r in rows[1:])


def test_seed_override_changes_metrics(config, tmp_path):
    assert main(["train", "--config", str(config), "--out-dir", str(tmp_path / "a")]) == 0
    assert main(["train", "--config", str(config), "--out-dir", str(tmp_path / "b"),
                 "--seed", "5"]) == 0
    assert ((tmp_path / "a" / "metrics.csv").read_bytes()
            != (tmp_path / "b" / "metrics.csv").read_bytes())


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({k: v for k, v in SMALL.items() if k != "M"}))
    assert main(["train", "--config", str(bad), "--out-dir", str(tmp_path / "x")]) == 2
    assert "M" in capsys.readouterr().err
    bad.write_text(json.dumps({**SMALL, "K": 9}))
    assert main(["train", "--config", str(bad), "--out-dir", str(tmp_path / "x")]) == 2
    assert main(["train", "--config", str(tmp_path / "none.json"), "--out-dir",
                 str(tmp_path / "x")]) == 2


def test_eval_missing_checkpoint_exit_1(tmp_path, capsys):
    assert main(["eval", str(tmp_path / "nothing")]) == 1
    assert "error" in capsys.readouterr().err


def test_bad_log_level_exit_2(config, tmp_path, monkeypatch):
    monkeypatch.setenv("ARAC_LOG", "chatty")
    assert main(["train", "--config", str(config), "--out-dir", str(tmp_path / "r")]) == 2


def test_didactic_command(tmp_path):
    out = tmp_path / "d" / "grid.json"
    assert main(["didactic", "--flows", "1", "--steps", "20", "--log-every", "10",
                 "--resolution", "11", "--out", str(out)]) == 0
    blob = json.loads(out.read_text())
    assert blob["snapshot_steps"] == [0, 10, 20]
    assert len(blob["densities"]) == 3 and len(blob["densities"][0]) == 11
    assert blob["target_mean"] == [3.0, 3.0] and blob["repulsive_mean"] == [-2.0, -2.0]
    assert main(["didactic", "--flows", "-1", "--out", str(out)]) == 2


def test_ablate_lambda(config, tmp_path, capsys):
    out = tmp_path / "abl"
    assert main(["ablate-lambda", "--config", str(config), "--out-dir", str(out),
                 "--lambdas", "0,1", "--samples", "20", "--probe-states", "2"]) == 0
    summary = list(csv.reader(capsys.readouterr().out.splitlines()))
    assert summary[0] == ["lambda", "mean_pairwise_kl"] and len(summary) == 3
    with open(out / "actions.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["lambda", "state_id", "agent_id", "a1", "a2"]
    assert len(rows) == 1 + 2 * 2 * 3 * 20
    with open(out / "ablation.csv") as fh:
        abl = list(csv.DictReader(fh))
    # both lambdas start from the same initial population
    assert abl[0]["init_hash_agent0"] == abl[1]["init_hash_agent0"]
    assert main(["ablate-lambda", "--config", str(config), "--out-dir", str(out),
                 "--lambdas", "a,b"]) == 2


def test_plot_flag_writes_figure(config, tmp_path):
    pytest.importorskip("matplotlib")
    out = tmp_path / "run"
    assert main(["train", "--config", str(config), "--out-dir", str(out), "--plot"]) == 0
    assert (out / "fitness.png").stat().st_size > 0
    grid = tmp_path / "g.json"
    assert main(["didactic", "--flows", "0", "--steps", "5", "--resolution", "9",
                 "--out", str(grid), "--plot"]) == 0
    assert grid.with_suffix(".png").exists()


def test_module_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "arac", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("train", "eval", "didactic", "ablate-lambda"):
        assert cmd in out.stdout
