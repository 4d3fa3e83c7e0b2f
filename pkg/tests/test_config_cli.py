import json
import logging
import math
import threading

import pytest

from relforge import cli
from relforge.config import ConfigError, RunConfig, parse_config

TINY = {
    "n_train": 8, "workers": 1, "agent_episodes": 2, "srg_epochs": 1, "batch_size": 4,
    "srg_lr": 1e-3, "agent_lr": 1e-3, "rg_steps": 2, "fd_steps": 2,
    "scene": {"n_clips": 12, "n_classes": 3, "n_persons": 4, "n_frames": 6, "d_feature": 5,
              "t_distill": 3, "noise_frames": 2, "distractor_persons": 1},
    "srg_net": {"d_v": 4, "d_e": 3},
    "fd_net": {"conv1": 4, "conv2": 4, "conv3": 3, "conv4": 3, "fc_mask": 4, "fc_slot": 5,
               "hidden": 4},
    "rg_net": {"fc1": 6, "fc2": 5, "fc3": 6, "fc4": 5, "fc5": 4, "fc6": 5, "fc7": 5,
               "hidden": 6},
}


@pytest.fixture
def tiny(tmp_path, monkeypatch):
    monkeypatch.delenv("RELFORGE_OUT", raising=False)
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def run(argv, out):
    return cli.main(list(argv) + ["--out-root", str(out)])


def only_run_dir(root, command):
    dirs = sorted(p for p in root.iterdir() if f"_{command}_" in p.name)
    assert dirs, f"no run dir for {command}"
    return dirs[-1]


# ---- configuration ----

def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "empty.json"
    path.write_text("")
    cfg = parse_config(str(path))
    assert (cfg.gamma, cfg.beta, cfg.tau_max, cfg.workers) == (0.99, 0.01, 5, 16)
    assert (cfg.omega_rg, cfg.omega_fd) == (15.0, 20.0)
    sc = cfg.scene_config()
    assert (sc.n_frames, sc.t_distill, cfg.srg_config().m) == (10, 5, 3)
    assert cfg.to_dict() == RunConfig().to_dict()


def test_gamma_out_of_range(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"gamma": 1.5}))
    with pytest.raises(ConfigError, match="gamma"):
        parse_config(str(path))


def test_flag_overrides_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"gamma": 0.5, "beta": 0.2}))
    cfg = parse_config(str(path), {"gamma": "0.9"})
    assert cfg.gamma == 0.9 and cfg.beta == 0.2


def test_unknown_keys_rejected(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(ConfigError, match="bogus"):
        parse_config(str(path))
    with pytest.raises(ConfigError, match="scene.nope"):
        parse_config(None, {"scene.nope": "3"})


def test_dotted_and_list_overrides():
    cfg = parse_config(None, {"scene.noise_frames": "5", "schedule": "SRG,FD"})
    assert cfg.scene_config().noise_frames == 5
    assert cfg.schedule == ["SRG", "FD"]
    with pytest.raises(ConfigError, match="schedule"):
        parse_config(None, {"schedule": "SRG,XX"})


def test_infeasible_scene_names_section():
    with pytest.raises(ConfigError, match="scene"):
        parse_config(None, {"scene.distractor_persons": "9"})


# ---- metrics writer ----

def test_metrics_round_trip(tmp_path):
    path = tmp_path / "m.jsonl"
    w = cli.MetricsWriter(str(path))
    recs = [{"stage": 1, "component": "SRG", "step": 1, "loss": 0.5},
            {"stage": 2, "component": "FD", "step": 3, "reward": -1.0, "wall_ms": 2.5}]
    for r in recs:
        w(r)
    w.close()
    assert len(path.read_text().splitlines()) == 2
    assert cli.read_metrics(str(path)) == recs


def test_non_finite_written_as_null(tmp_path, caplog):
    path = tmp_path / "m.jsonl"
    w = cli.MetricsWriter(str(path))
    with caplog.at_level(logging.WARNING, logger="relforge"):
        w({"loss": float("nan"), "reward": float("inf"), "ok": 1.0})
    w.close()
    assert cli.read_metrics(str(path)) == [{"loss": None, "reward": None, "ok": 1.0}]
    assert "non-finite" in caplog.text


def test_concurrent_writers_do_not_interleave(tmp_path):
    path = tmp_path / "m.jsonl"
    w = cli.MetricsWriter(str(path))
    pad = "x" * 2000

    def work(k):
        for i in range(200):
            w({"worker": k, "i": i, "pad": pad})
    threads = [threading.Thread(target=work, args=(k,)) for k in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    w.close()
    lines = path.read_text().splitlines()
    assert len(lines) == 1600
    recs = [json.loads(line) for line in lines]
    for k in range(8):
        assert [r["i"] for r in recs if r["worker"] == k] == list(range(200))


def test_wall_time_can_be_dropped(tmp_path):
    path = tmp_path / "m.jsonl"
    w = cli.MetricsWriter(str(path), keep_wall=False)
    w({"step": 1, "wall_ms": 3.0})
    w.close()
    assert cli.read_metrics(str(path)) == [{"step": 1}]


def test_run_dirs_never_overwritten(tmp_path):
    a = cli.make_run_dir(str(tmp_path), 0, "eval")
    b = cli.make_run_dir(str(tmp_path), 0, "eval")
    assert a != b


# ---- commands ----

def test_grad_check_command(tmp_path, capsys):
    assert run(["grad-check"], tmp_path) == 0
    out = capsys.readouterr().out
    for name in ("affine", "lstm_cell", "softmax_xent", "srg_frame", "rg_agent", "fd_agent"):
        assert name in out
    recs = cli.read_metrics(str(only_run_dir(tmp_path, "grad-check") / "metrics.jsonl"))
    assert recs[0]["event"] == "config"
    assert all(r["passed"] for r in recs[1:])


def test_eval_without_checkpoint_fails(tiny, tmp_path, capsys):
    assert run(["eval", "--config", str(tiny)], tmp_path) != 0
    assert "checkpoint" in capsys.readouterr().err


def test_eval_with_missing_checkpoint_file(tiny, tmp_path, capsys):
    code = run(["eval", "--config", str(tiny), "--checkpoint", str(tmp_path / "no.ckpt")],
               tmp_path)
    assert code != 0
    assert "not found" in capsys.readouterr().err


def test_bad_dataset_path(tiny, tmp_path, capsys):
    assert run(["train-srg", "--config", str(tiny), "--data", str(tmp_path / "x.jsonl")],
               tmp_path) != 0
    assert "dataset" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path, capsys):
    assert run(["grad-check", "--gamma", "1.5"], tmp_path) == 2
    assert "gamma" in capsys.readouterr().err


def test_environment_overrides_output_root(tiny, tmp_path, monkeypatch):
    env_root = tmp_path / "env"
    monkeypatch.setenv("RELFORGE_OUT", str(env_root))
    assert run(["generate", "--config", str(tiny), "--data", str(tmp_path / "d.jsonl")],
               tmp_path / "flag") == 0
    assert any(env_root.iterdir())
    assert not (tmp_path / "flag").exists()


def test_generate_then_train_then_inspect(tiny, tmp_path, capsys):
    data = tmp_path / "d.jsonl"
    root = tmp_path / "runs"
    assert run(["generate", "--config", str(tiny), "--data", str(data)], root) == 0
    assert len(data.read_text().splitlines()) == 12
    assert run(["generate", "--config", str(tiny), "--data", str(data)], root) != 0

    assert run(["train-alternate", "--config", str(tiny), "--data", str(data), "--set",
                "schedule=SRG,FD,RG"], root) == 0
    alt = only_run_dir(root, "train-alternate")
    ckpt = alt / "stage3_rg.ckpt"
    assert ckpt.exists() and (alt / "config.json").exists()
    recs = cli.read_metrics(str(alt / "metrics.jsonl"))
    assert recs[0]["event"] == "config"
    assert recs[0]["config"]["schedule"] == ["SRG", "FD", "RG"]
    assert {r.get("component") for r in recs[1:-1]} == {"SRG", "FD", "RG"}
    assert recs[-1]["event"] == "summary" and len(recs[-1]["stage_accuracy"]) == 3

    capsys.readouterr()
    assert run(["inspect-gates", "--config", str(tiny), "--data", str(data), "--checkpoint",
                str(ckpt)], root) == 0
    stdout = capsys.readouterr().out.splitlines()
    gates = (only_run_dir(root, "inspect-gates") / "gates.jsonl").read_text().splitlines()
    assert len(gates) == len(stdout) == 12 - TINY["n_train"]
    rec = json.loads(gates[0])
    assert set(rec) == {"clip_id", "predicted", "label", "gates", "person_importance"}
    assert len(rec["gates"]) == 6
    assert math.isclose(sum(rec["person_importance"]), 1.0)

    assert run(["eval", "--config", str(tiny), "--data", str(data), "--checkpoint", str(ckpt),
                "--dump-trace"], root) == 0
    ev = only_run_dir(root, "eval")
    result = json.loads((ev / "eval.json").read_text())
    assert 0.0 <= result["accuracy"] <= 1.0 and "mask_recall" in result
    trace = json.loads((ev / "traces_rg.jsonl").read_text().splitlines()[0])
    assert trace["agent"] == "RG" and len(trace["steps"]) == TINY["rg_steps"]
    assert set(trace["steps"][0]) == {"step", "l21", "p_correct", "reward", "gates"}


def test_inspect_gates_needs_gating_agent(tiny, tmp_path):
    data = tmp_path / "d.jsonl"
    assert run(["generate", "--config", str(tiny), "--data", str(data)], tmp_path) == 0
    assert run(["train-srg", "--config", str(tiny), "--data", str(data)], tmp_path) == 0
    ckpt = only_run_dir(tmp_path, "train-srg") / "model.ckpt"
    assert run(["inspect-gates", "--config", str(tiny), "--data", str(data),
                "--checkpoint", str(ckpt)], tmp_path) == 2


def test_train_agent_commands(tiny, tmp_path):
    data = tmp_path / "d.jsonl"
    assert run(["generate", "--config", str(tiny), "--data", str(data)], tmp_path) == 0
    assert run(["train-srg", "--config", str(tiny), "--data", str(data)], tmp_path) == 0
    srg_ckpt = only_run_dir(tmp_path, "train-srg") / "model.ckpt"
    assert run(["train-fd", "--config", str(tiny), "--data", str(data), "--checkpoint",
                str(srg_ckpt), "--dump-trace"], tmp_path) == 0
    fd_dir = only_run_dir(tmp_path, "train-fd")
    assert (fd_dir / "model.ckpt").exists()
    trace = json.loads((fd_dir / "traces.jsonl").read_text().splitlines()[0])
    assert {"step", "mask", "reward", "p_correct"} <= set(trace["steps"][0])
    assert run(["train-rg", "--config", str(tiny), "--data", str(data), "--checkpoint",
                str(fd_dir / "model.ckpt")], tmp_path) == 0
    rg_recs = cli.read_metrics(str(only_run_dir(tmp_path, "train-rg") / "metrics.jsonl"))
    assert any("l21" in r for r in rg_recs)
