import json
import os
import signal
import subprocess
import sys
import time
from dataclasses import replace

import numpy as np
import pytest

from offmbrl.config import (
    AgentSection,
    ManagerSection,
    config_from_dict,
    desk_config,
    load_config,
)
from offmbrl.errors import ConfigError
from offmbrl import harness
from offmbrl.cli import main as cli_main


def quick_cfg(tmp_path, env="maze-umaze", transitions=3000, steps=120, **extra):
    sections = dict(
        dataset=dict(transitions=transitions, path=str(tmp_path / "d.ofrl")),
        run=dict(
            flat_steps=steps, manager_steps=steps, worker_steps=steps,
            log_every=40, eval_episodes=3, out_dir=str(tmp_path / "runs"),
        ),
        env=dict(max_steps=40),
    )
    for key, value in extra.items():
        sections.setdefault(key, {}).update(value)
    return desk_config(env, **sections)


# -- config ------------------------------------------------------------------------


def test_paper_defaults_are_config_defaults():
    a = AgentSection()
    assert a.gamma == 0.99
    assert a.latent_dim == 50
    assert a.plan_horizon == 2
    assert a.population == 512
    assert a.num_pi_samples == 512
    assert a.num_random_samples == 0
    assert a.num_elites == 64
    assert a.iterations == 6
    assert a.momentum == 0.1
    assert a.temperature == 0.5
    assert a.prioritized_replay is False
    assert a.lr == 3e-4
    assert a.batch_size == 256
    assert a.mlp_hidden == 512
    assert a.enc_hidden == 256
    assert a.bootstrap_plan_mean and a.bootstrap_td_mean
    assert a.reward_coef == 0.5
    assert a.critic_coef == 0.1
    assert a.consistency_coef == 2.0
    assert a.rho == 0.5
    assert a.grad_clip == 10.0
    assert a.target_update_freq == 2
    assert a.target_momentum == 0.01
    assert a.tau == 0.9
    assert a.beta == 3.0
    assert a.adv_clip == 100.0
    assert a.value_loss_coef == 0.1
    assert (a.log_std_min, a.log_std_max) == (-5.0, 2.0)
    assert a.action_clip == 0.99
    assert a.entropy_bonus == 0.1
    m = ManagerSection()
    assert m.latent_dim == 10
    assert m.plan_horizon == 4
    assert m.coarseness == 8
    assert m.blocks == 8 and m.classes == 10
    assert m.tau == 0.9 and m.adv_clip == 100.0 and m.value_loss_coef == 0.1
    assert ManagerSection(reward_scale=0.1).beta == pytest.approx(30.0)


def test_every_hyperparameter_settable_by_name():
    data = {
        "agent": dict(gamma=0.95, latent_dim=8, plan_horizon=3, population=16,
                      num_pi_samples=12, num_random_samples=4, num_elites=4,
                      iterations=2, momentum=0.2, temperature=0.7,
                      prioritized_replay=False, lr=1e-3, batch_size=32,
                      mlp_hidden=32, enc_hidden=16, bootstrap_plan_mean=False,
                      bootstrap_td_mean=False, reward_coef=1.0, critic_coef=0.2,
                      consistency_coef=3.0, rho=0.7, grad_clip=5.0,
                      target_update_freq=3, target_momentum=0.05, tau=0.8,
                      beta=1.0, adv_clip=50.0, value_loss_coef=0.2,
                      critic_loss="iql", log_std_min=-4.0, log_std_max=1.0,
                      action_clip=0.98, entropy_bonus=0.0),
        "manager": dict(latent_dim=6, plan_horizon=2, coarseness=4, blocks=4,
                        classes=5, reward_scale=0.1, replan_interval=4),
    }
    cfg = config_from_dict(data)
    assert cfg.agent.gamma == 0.95
    assert cfg.manager.beta == pytest.approx(30.0)


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        config_from_dict({"agent": {"learning_rate_typo": 1.0}})
    with pytest.raises(ConfigError, match="section"):
        config_from_dict({"agents": {}})


def test_toml_round_trip(tmp_path):
    toml = """
[env]
name = "maze-medium"
max_steps = 120

[agent]
latent_dim = 16
mlp_hidden = 64
enc_hidden = 64

[run]
seed = 3
"""
    path = tmp_path / "c.toml"
    path.write_text(toml)
    cfg = load_config(path)
    assert cfg.env.name == "maze-medium"
    assert cfg.agent.latent_dim == 16
    assert cfg.run.seed == 3


# -- pipeline determinism and artifacts ------------------------------------------------


def test_gen_data_manifest_records_hash(tmp_path):
    cfg = quick_cfg(tmp_path)
    path = harness.cmd_gen_data(cfg)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["outputs"] == ["d.ofrl"]
    assert manifest["config_hash"] == cfg.config_hash()
    assert harness.sha256_file(path)


def test_train_metrics_byte_identical(tmp_path):
    cfg = quick_cfg(tmp_path)
    harness.cmd_gen_data(cfg)
    out_a = harness.cmd_train(cfg, "iql-tdmpc", seed=1, out_root=str(tmp_path / "a"))
    out_b = harness.cmd_train(cfg, "iql-tdmpc", seed=1, out_root=str(tmp_path / "b"))
    a = open(out_a["metrics"], "rb").read()
    b = open(out_b["metrics"], "rb").read()
    assert a == b
    ca = open(out_a["checkpoint"], "rb").read()
    cb = open(out_b["checkpoint"], "rb").read()
    assert ca == cb


def test_eval_deterministic_and_results_csv(tmp_path):
    cfg = quick_cfg(tmp_path)
    harness.cmd_gen_data(cfg)
    out = harness.cmd_train(cfg, "iql-tdmpc", seed=0)
    results = str(tmp_path / "results.csv")
    r1 = harness.cmd_eval(cfg, out["checkpoint"], seed=0, results_csv=results)
    r2 = harness.cmd_eval(cfg, out["checkpoint"], seed=0, results_csv=results)
    assert r1.scores == r2.scores
    rows = harness.read_result_rows(results)
    assert rows[0]["env"] == "maze-umaze"
    assert any(r["seed"] == "aggregate" for r in rows)


def test_resume_continues_step_numbering(tmp_path):
    cfg = quick_cfg(tmp_path, steps=80)
    harness.cmd_gen_data(cfg)
    first = harness.cmd_train(cfg, "manager", seed=0, out_root=str(tmp_path / "r1"))
    second = harness.cmd_train(cfg, "manager", seed=0, out_root=str(tmp_path / "r2"),
                               resume=first["checkpoint"])
    lines = open(second["metrics"]).read().strip().split("\n")
    first_step = int(float(lines[1].split(",")[0]))
    last_step = int(float(lines[-1].split(",")[0]))
    assert first_step > 80
    assert last_step == 160


def test_missing_checkpoint_error_names_path(tmp_path):
    cfg = quick_cfg(tmp_path)
    with pytest.raises(ConfigError, match="nope.ckpt"):
        harness.cmd_eval(cfg, str(tmp_path / "nope.ckpt"))


def test_worker_intent_requires_manager(tmp_path):
    cfg = quick_cfg(tmp_path, worker=dict(augmentation="intent"))
    harness.cmd_gen_data(cfg)
    with pytest.raises(ConfigError, match="manager"):
        harness.cmd_train(cfg, "worker", seed=0)


def test_kill_mid_training_leaves_no_partial_artifacts(tmp_path):
    """SIGKILL during training: no checkpoint, no finished metrics file."""
    cfg_path = tmp_path / "cfg.toml"
    cfg_path.write_text(
        f"""
[env]
name = "maze-umaze"
max_steps = 40

[dataset]
transitions = 3000
path = "{tmp_path}/d.ofrl"

[agent]
latent_dim = 16
mlp_hidden = 64
enc_hidden = 64
num_pi_samples = 16
population = 16
num_elites = 4

[run]
manager_steps = 100000
log_every = 10
out_dir = "{tmp_path}/runs"
"""
    )
    cfg = load_config(cfg_path)
    harness.cmd_gen_data(cfg)
    proc = subprocess.Popen(
        [sys.executable, "-m", "offmbrl.cli", "train", "--config", str(cfg_path),
         "--agent", "manager", "--seed", "0"],
        stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL,
    )
    time.sleep(6.0)
    proc.send_signal(signal.SIGKILL)
    proc.wait()
    run_dir = tmp_path / "runs" / "manager-maze-umaze-s0"
    assert not (run_dir / "checkpoint.ckpt").exists()
    assert not (run_dir / "metrics.csv").exists()
    leftovers = list((tmp_path / "runs").rglob("*.ckpt"))
    assert leftovers == []


# -- CLI ----------------------------------------------------------------------------------


def test_cli_usage_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        cli_main(["gen-data"])  # missing --env and --config
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli_main(["train", "--config", "x.toml"])  # missing --agent
    assert exc.value.code == 2


def test_cli_gen_data_flags(tmp_path):
    out = str(tmp_path / "d.ofrl")
    code = cli_main([
        "gen-data", "--env", "maze-umaze", "--mix", "play", "--n", "2000",
        "--seed", "0", "--out", out,
    ])
    assert code == 0 and os.path.exists(out)
    from offmbrl.dataset import load_dataset

    ds = load_dataset(out)
    assert ds.size == 2000 and ds.env_name == "maze-umaze"


def test_cli_gen_data_jsonl(tmp_path):
    out = str(tmp_path / "d.jsonl")
    code = cli_main([
        "gen-data", "--env", "maze-umaze", "--n", "500", "--seed", "1",
        "--out", out, "--format", "jsonl",
    ])
    assert code == 0
    assert len(open(out).read().strip().split("\n")) == 500


def test_cli_runtime_error_exit_1(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[dataset]\npath = \"missing.ofrl\"\n")
    code = cli_main(["train", "--config", str(cfg), "--agent", "tdmpc"])
    assert code == 1


def test_cli_plot(tmp_path):
    csv = tmp_path / "m.csv"
    csv.write_text("step,L_f,L_R\n1,0.5,0.2\n2,0.4,0.1\n")
    out = str(tmp_path / "m.png")
    assert cli_main(["plot", "--csv", str(csv), "--out", out]) == 0
    assert os.path.getsize(out) > 0


def test_welch_t_test_sanity():
    rng = np.random.default_rng(0)
    a = rng.normal(0, 1, 20)
    b = rng.normal(3, 1, 20)
    t, dof, p = harness.welch_t_test(a, b)
    assert p < 1e-6
    t2, _, p2 = harness.welch_t_test(a, rng.normal(0, 1, 20))
    assert p2 > 0.01
