import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from dqnlab.cli import main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def write_config(tmp_path, d, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(d))
    return str(path)


def chain_dict(steps=300, **run):
    return {"env": {"benchmark": "chain"},
            "network": {"hidden": [4], "output_widths": [3, 3], "activation": "tanh", "seed": 0},
            "schedule": {"c": 0.5, "n0": 10, "p": 0.6},
            "policy": {"epsilon0": 1.0, "decay": 0.99, "floor": 0.1},
            "run": {"steps": steps, "checkpoint_every": 100, **run}}


def files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(Path(root).rglob("*")) if p.is_file()}


def test_train_zero_steps(tmp_path):
    cfg = write_config(tmp_path, chain_dict(steps=0))
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o"), "--run", "r"]) == 0
    run = tmp_path / "o" / "r"
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["status"] == "completed"
    rows = (run / "record.csv").read_text().splitlines()
    assert rows[0] == f"# config_hash={manifest['config_hash']}" and rows[1] == "# mode=online"
    assert len(rows) == 3  # header only
    assert [p.name for p in (run / "checkpoints").iterdir()] == ["step_000000000.json"]


def test_invalid_schedule_exits_1(tmp_path, capsys):
    d = chain_dict()
    d["schedule"]["p"] = 0.4
    assert main(["train", "--config", write_config(tmp_path, d), "--out", str(tmp_path)]) == 1
    assert "schedule.p" in capsys.readouterr().err


def test_rerun_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path, chain_dict())
    for out in ("a", "b"):
        assert main(["train", "--config", cfg, "--out", str(tmp_path / out), "--run", "r"]) == 0
        assert main(["diagnose", "--out", str(tmp_path / out), "--run", "r", "--anchors", "50",
                     "--horizon", "0.5", "--max-gap", "inf", "--max-tail-ratio", "inf",
                     "--max-grad-ratio", "inf", "--halving-tol", "inf", "--mass-floor", "inf"]) == 0
    a, b = files(tmp_path / "a"), files(tmp_path / "b")
    assert a.keys() == b.keys() and a == b


def test_default_run_id_is_deterministic(tmp_path, capsys):
    cfg = write_config(tmp_path, chain_dict(steps=50))
    main(["train", "--config", cfg, "--out", str(tmp_path)])
    main(["train", "--config", cfg, "--out", str(tmp_path), "--seed", "3"])
    names = sorted(p.name for p in tmp_path.iterdir() if p.is_dir())
    assert len(names) == 2 and all(n.startswith("run-") for n in names)
    assert {n.rsplit("-", 1)[1] for n in names} == {"s0", "s3"}


def test_diagnose_single_state_passes(tmp_path):
    out = str(tmp_path)
    assert main(["train", "--config", str(CONFIGS / "single.json"), "--out", out, "--run", "s"]) == 0
    assert main(["diagnose", "--out", out, "--run", "s"]) == 0
    report = json.loads((tmp_path / "s" / "diagnostics" / "report.json").read_text())
    assert report["passed"] and report["failures"] == []
    assert report["greedy_ties"]["count"] == 0  # one action: no ties to break
    for name in ("martingale.csv", "tracking.csv", "averaged_gradient.csv"):
        first = (tmp_path / "s" / "diagnostics" / name).read_text().splitlines()[0]
        assert first == f"# config_hash={report['config_hash']}"


def test_diagnose_trap_exits_3_and_names_region(tmp_path, capsys):
    d = json.loads((CONFIGS / "trap_greedy.json").read_text())
    d["run"]["steps"] = 3000
    out = str(tmp_path)
    assert main(["train", "--config", write_config(tmp_path, d), "--out", out, "--run", "t"]) == 0
    capsys.readouterr()
    assert main(["diagnose", "--out", out, "--run", "t", "--anchors", "1000"]) == 3
    err = capsys.readouterr().err
    assert "states [2, 3]" in err

    assert main(["diagnose", "--out", out, "--run", "t", "--anchors", "1000", "--max-gap", "inf",
                 "--max-tail-ratio", "inf", "--mean-tol", "inf", "--halving-tol", "inf",
                 "--max-grad-ratio", "inf", "--mass-floor", "inf"]) == 0


def test_oracle_single_state(tmp_path):
    assert main(["oracle", "--config", str(CONFIGS / "single.json"), "--out", str(tmp_path), "--run", "o"]) == 0
    oracle = json.loads((tmp_path / "o" / "oracle.json").read_text())
    assert oracle["q_star"] == [[2.0]]
    rows = list(csv.reader((tmp_path / "o" / "q_star.csv").open()))
    assert rows[0][0].startswith("# config_hash=") and rows[1] == ["state_index", "action", "q"]


def test_oracle_reducible_has_two_stationary_distributions(tmp_path):
    cfg = write_config(tmp_path, {**chain_dict(), "env": {"benchmark": "reducible"}})
    assert main(["oracle", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    run = next((tmp_path / "a").iterdir())
    st = json.loads((run / "stationary.json").read_text())
    assert st["count"] == 2
    assert all(abs(sum(d) - 1) < 1e-12 for d in st["distributions"])
    assert main(["oracle", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    assert files(tmp_path / "a") == files(tmp_path / "b")


def test_oracle_from_mdp_file(tmp_path):
    from dqnlab.envs import save_mdp, trap_mdp
    save_mdp(trap_mdp(), tmp_path / "trap.json")
    assert main(["oracle", "--mdp", str(tmp_path / "trap.json"), "--out", str(tmp_path), "--run", "o"]) == 0
    assert json.loads((tmp_path / "o" / "oracle.json").read_text())["pi_star"] == [0, 0, 1, 1]


def test_replay_compare_with_replay_disabled(tmp_path):
    cfg = write_config(tmp_path, chain_dict())
    assert main(["replay-compare", "--config", cfg, "--out", str(tmp_path), "--run", "c"]) == 0
    pair, = json.loads((tmp_path / "c" / "comparison.json").read_text())["pairs"]
    assert pair["tv_distance"] == 0.0


def test_replay_compare_unit_buffer_matches_online(tmp_path):
    d = chain_dict()
    d["replay"] = {"enabled": True, "capacity": 1, "batch_size": 1}
    cfg = write_config(tmp_path, d)
    assert main(["replay-compare", "--config", cfg, "--out", str(tmp_path), "--run", "c", "--repeats", "2"]) == 0
    report = json.loads((tmp_path / "c" / "comparison.json").read_text())
    for pair in report["pairs"]:
        assert pair["tv_distance"] == 0.0
        assert pair["online"] == pair["replay"]


def test_missing_run_exits_1(tmp_path, capsys):
    assert main(["diagnose", "--out", str(tmp_path), "--run", "nope"]) == 1
    assert "nope" in capsys.readouterr().err


def test_bad_arguments_exit_1(tmp_path):
    assert main(["train"]) == 1
    assert main(["nonsense"]) == 1
    assert main(["diagnose", "--run", "x", "--max-gap", "nan"]) == 1
    assert main(["diagnose", "--run", "x", "--max-gap", "-1"]) == 1


def test_out_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("DQNLAB_OUT", str(tmp_path / "env-root"))
    cfg = write_config(tmp_path, chain_dict(steps=20))
    assert main(["train", "--config", cfg, "--run", "r"]) == 0
    assert (tmp_path / "env-root" / "r" / "manifest.json").exists()


def test_diverged_run_exits_2(tmp_path):
    d = chain_dict(steps=500, divergence_guard=1e-3)
    assert main(["train", "--config", write_config(tmp_path, d), "--out", str(tmp_path), "--run", "r"]) == 2
    assert json.loads((tmp_path / "r" / "manifest.json").read_text())["status"] == "diverged"


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dqnlab", "oracle", "--config", str(CONFIGS / "single.json"),
                           "--out", str(tmp_path), "--run", "o"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "2.0" in proc.stdout
