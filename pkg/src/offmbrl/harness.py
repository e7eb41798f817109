"""Experiment orchestration: gen-data -> train -> eval -> ablate, plus plots.

Every command writes its final artifacts atomically (temp file + rename) and
records a run manifest with content hashes of its inputs and outputs. Metrics
stream to ``metrics.csv.partial`` and are renamed on completion, so a crash
never leaves an artifact that looks finished.
"""

from __future__ import annotations

import fcntl
import hashlib
import json
import os
import time
from dataclasses import dataclass

import numpy as np

from offmbrl import workers as workers_mod
from offmbrl.autodiff import Adam, load_checkpoint, save_checkpoint
from offmbrl.behavior import generate_dataset, normalized_score
from offmbrl.config import TDMPC_BASELINE_OVERRIDES, ExperimentConfig
from offmbrl.dataset import coarsen, export_jsonl, load_dataset, save_dataset
from offmbrl.envs import make_env
from offmbrl.errors import ConfigError
from offmbrl.iql import act_offline, train_step_iql_tdmpc
from offmbrl.manager import ManagerModelSet, manager_train_step
from offmbrl.tdmpc import ModelSet, train_step_tdmpc
from offmbrl.workers import augment_dataset, evaluate_worker, make_worker

METRIC_COLUMNS = ("step", "L_f", "L_R", "L_Q", "L_pi", "grad_norm")
RESULT_COLUMNS = ("env", "algorithm", "mode", "seed", "score", "std", "step", "config")

FLAT_AGENTS = ("tdmpc", "iql-tdmpc")
AGENTS = FLAT_AGENTS + ("manager", "worker")


def tdmpc_planner_split(n_total: int) -> tuple[int, int]:
    """The online baseline's 25/487 pi-to-random split, scaled to a pool size."""
    n_pi = max(1, int(round(n_total * 25 / 512)))
    return n_pi, max(0, n_total - n_pi)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_text(path, text: str):
    directory = os.path.dirname(os.path.abspath(path)) or "."
    tmp = os.path.join(directory, f".tmp-{os.path.basename(path)}-{os.getpid()}")
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)


def max_threads() -> int:
    try:
        return max(1, int(os.environ.get("OFFMBRL_THREADS", "1")))
    except ValueError:
        return 1


class MetricsWriter:
    """Streams rows to ``<path>.partial``; the final name appears on finish."""

    def __init__(self, path):
        self.path = str(path)
        self._partial = self.path + ".partial"
        self._file = open(self._partial, "w", encoding="utf-8")
        self._columns = None

    def write(self, step: int, values: dict):
        if self._columns is None:
            extras = sorted(set(values) - set(METRIC_COLUMNS))
            self._columns = list(METRIC_COLUMNS) + extras
            self._file.write(",".join(self._columns) + "\n")
        row = {"step": step, **values}
        cells = [repr(row[c]) if c in row else "" for c in self._columns]
        self._file.write(",".join(cells) + "\n")

    def finish(self):
        self._file.close()
        os.replace(self._partial, self.path)

    def abort(self):
        self._file.close()
        if os.path.exists(self._partial):
            os.unlink(self._partial)


def append_result_rows(path, rows):
    """Append rows to the shared results CSV under an exclusive lock."""
    payload = "".join(
        ",".join(repr(r[c]) if not isinstance(r[c], str) else r[c] for c in RESULT_COLUMNS)
        + "\n"
        for r in rows
    )
    header = ",".join(RESULT_COLUMNS) + "\n"
    with open(path, "a+", encoding="utf-8") as f:
        fcntl.flock(f.fileno(), fcntl.LOCK_EX)
        try:
            f.seek(0, os.SEEK_END)
            if f.tell() == 0:
                f.write(header)
            f.write(payload)
        finally:
            fcntl.flock(f.fileno(), fcntl.LOCK_UN)


def read_result_rows(path):
    rows = []
    with open(path, encoding="utf-8") as f:
        header = f.readline().strip().split(",")
        for line in f:
            cells = line.rstrip("\n").split(",")
            rows.append(dict(zip(header, cells)))
    return rows


def write_run_manifest(out_dir, cfg: ExperimentConfig, seed: int, inputs: dict,
                       outputs: list, started: float):
    manifest = {
        "config_hash": cfg.config_hash(),
        "seed": seed,
        "inputs": {name: sha256_file(p) for name, p in inputs.items() if os.path.exists(p)},
        "outputs": sorted(os.path.basename(p) for p in outputs),
        "wall_clock_s": round(time.time() - started, 3),
    }
    atomic_write_text(os.path.join(out_dir, "manifest.json"), json.dumps(manifest, indent=2))
    return manifest


# -- model construction -------------------------------------------------------------


def build_flat_models(cfg: ExperimentConfig, state_dim, action_dim, seed) -> ModelSet:
    a = cfg.agent
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x110D)))
    return ModelSet(
        rng,
        state_dim,
        action_dim,
        latent_dim=a.latent_dim,
        hidden=a.mlp_hidden,
        enc_hidden=a.enc_hidden,
        log_std_range=(a.log_std_min, a.log_std_max),
    )


def build_manager(cfg: ExperimentConfig, state_dim, seed) -> ManagerModelSet:
    m = cfg.manager
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x3A6A)))
    return ManagerModelSet(
        rng,
        state_dim,
        m.manager_config(),
        hidden=m.mlp_hidden,
        enc_hidden=m.enc_hidden,
    )


def manager_sidecar(cfg: ExperimentConfig, state_dim: int) -> dict:
    m = cfg.manager
    return {
        "kind": "manager",
        "k": m.coarseness,
        "H": m.plan_horizon,
        "L": m.blocks,
        "C": m.classes,
        "d": m.latent_dim,
        "reward_scale": m.reward_scale,
        "replan_interval": m.replan_interval,
        "state_dim": state_dim,
        "env": cfg.env.name,
    }


def load_manager_from(path) -> tuple[ManagerModelSet, dict]:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "manager":
        raise ConfigError(f"{path} is not a manager checkpoint")
    from offmbrl.manager import ManagerConfig

    mgr_cfg = ManagerConfig(
        latent_dim=meta["d"],
        plan_horizon=meta["H"],
        coarseness=meta["k"],
        blocks=meta["L"],
        classes=meta["C"],
        reward_scale=meta["reward_scale"],
        replan_interval=meta["replan_interval"],
    )
    hidden = meta.get("mlp_hidden", 512)
    enc_hidden = meta.get("enc_hidden", 256)
    mgr = ManagerModelSet(
        np.random.default_rng(0), meta["state_dim"], mgr_cfg,
        hidden=hidden, enc_hidden=enc_hidden,
    )
    mgr.load_params(arrays)
    return mgr, meta


# -- commands ---------------------------------------------------------------------------


def cmd_gen_data(cfg: ExperimentConfig, out_path=None, fmt="ofrl"):
    started = time.time()
    env_cfg = cfg.data_env_config()
    ds = generate_dataset(env_cfg, cfg.dataset.mixture, cfg.dataset.transitions,
                          cfg.dataset.seed)
    out_path = out_path or cfg.dataset.path
    if not out_path:
        raise ConfigError("gen-data needs an output path (dataset.path or --out)")
    out_dir = os.path.dirname(os.path.abspath(out_path)) or "."
    os.makedirs(out_dir, exist_ok=True)
    if fmt == "jsonl":
        export_jsonl(ds, out_path)
    elif fmt == "ofrl":
        save_dataset(ds, out_path)
    else:
        raise ConfigError(f"unknown dataset format {fmt!r}")
    write_run_manifest(out_dir, cfg, cfg.dataset.seed, {}, [out_path], started)
    return out_path


def _resume_start(models, resume) -> int:
    if not resume:
        return 0
    arrays, meta = load_checkpoint(resume)
    models.load_params(arrays)
    return int(meta.get("step", 0))


def _train_flat(cfg, ds, agent, seed, metrics: MetricsWriter, resume=None):
    env_cfg = cfg.env_config()
    env = make_env(env_cfg)
    if agent == "tdmpc":
        from dataclasses import replace

        a = cfg.agent
        n_pi, n_rand = tdmpc_planner_split(a.num_pi_samples + a.num_random_samples)
        overrides = dict(TDMPC_BASELINE_OVERRIDES)
        # keep desk-scale planner sizes: scale the online-lineage pi/random split
        overrides["num_pi_samples"] = n_pi
        overrides["num_random_samples"] = n_rand
        overrides["population"] = n_pi + n_rand
        overrides["batch_size"] = a.batch_size
        overrides["lr"] = a.lr
        acfg = replace(a, **overrides)
    else:
        acfg = cfg.agent
    if acfg.prioritized_replay:
        raise ConfigError("prioritized experience replay is disabled for offline runs")
    models = build_flat_models(cfg, env.state_dim, env.action_dim, seed)
    start = _resume_start(models, resume)
    opt_model = Adam(models.model_params(), lr=acfg.lr)
    opt_policy = Adam(models.policy_params(), lr=acfg.lr)
    weights = acfg.weights()
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x7E41, start)))
    horizon = acfg.plan_horizon
    for step in range(start + 1, start + cfg.run.flat_steps + 1):
        batch = ds.sample_subtrajectory_batch(horizon, acfg.batch_size, rng)
        if agent == "tdmpc":
            m = train_step_tdmpc(
                models, batch, weights, opt_model, opt_policy, rng, step,
                clip=acfg.grad_clip, target_freq=acfg.target_update_freq,
                target_momentum=acfg.target_momentum,
                bootstrap_mean=acfg.bootstrap_td_mean,
            )
        else:
            m = train_step_iql_tdmpc(
                models, batch, weights, acfg.iql(), opt_model, opt_policy, rng, step,
                clip=acfg.grad_clip, target_freq=acfg.target_update_freq,
                target_momentum=acfg.target_momentum,
            )
        if step % cfg.run.log_every == 0 or step == start + cfg.run.flat_steps:
            metrics.write(step, m.values)
    meta = {"kind": agent, "step": start + cfg.run.flat_steps, "env": cfg.env.name,
            "state_dim": env.state_dim, "action_dim": env.action_dim,
            "latent_dim": acfg.latent_dim, "mlp_hidden": acfg.mlp_hidden,
            "enc_hidden": acfg.enc_hidden}
    return models, meta, acfg


def _train_manager(cfg, ds, seed, metrics: MetricsWriter, resume=None):
    m = cfg.manager
    cds = coarsen(ds, m.coarseness)
    mgr = build_manager(cfg, ds.state_dim, seed)
    start = _resume_start(mgr, resume)
    opt_model = Adam(mgr.model_params(), lr=m.lr)
    opt_policy = Adam(mgr.policy_params(), lr=m.lr)
    opt_decoder = Adam(mgr.decoder_params(), lr=m.lr)
    from dataclasses import replace as dc_replace

    weights = dc_replace(cfg.agent.weights(), gamma=m.gamma)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x3A6B, start)))
    for step in range(start + 1, start + cfg.run.manager_steps + 1):
        batch = cds.sample_subtrajectory_batch(m.plan_horizon, m.batch_size, rng)
        out = manager_train_step(
            mgr, batch, weights, m.iql(), opt_model, opt_policy, rng, step,
            opt_decoder=opt_decoder, clip=cfg.agent.grad_clip,
            target_freq=cfg.agent.target_update_freq,
            target_momentum=cfg.agent.target_momentum,
        )
        if step % cfg.run.log_every == 0 or step == start + cfg.run.manager_steps:
            metrics.write(step, out.values)
    meta = manager_sidecar(cfg, ds.state_dim)
    meta.update({"step": start + cfg.run.manager_steps, "mlp_hidden": m.mlp_hidden,
                 "enc_hidden": m.enc_hidden})
    return mgr, meta


def _train_worker(cfg, ds, seed, metrics: MetricsWriter, manager_path=None,
                  resume=None):
    spec = cfg.worker.spec()
    manager = None
    manager_hash = ""
    if spec.augmentation == "intent":
        if not manager_path:
            raise ConfigError("worker intent training requires a manager checkpoint")
        manager, meta = load_manager_from(manager_path)
        if meta["state_dim"] != ds.state_dim:
            raise ConfigError(
                f"manager state_dim {meta['state_dim']} != dataset {ds.state_dim}"
            )
        manager_hash = sha256_file(manager_path)
    aug_rng = np.random.default_rng(np.random.SeedSequence((seed, 0xA06)))
    train_ds = augment_dataset(ds, spec.augmentation, aug_rng, manager=manager)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xB0C)))
    worker = make_worker(rng, train_ds.state_dim, train_ds.action_dim, spec)
    start = 0
    if resume:
        arrays, prev = load_checkpoint(resume)
        for name, param in worker.named_params():
            param.data[...] = arrays[name]
        start = int(prev.get("step", 0))
    for step in range(start + 1, start + cfg.run.worker_steps + 1):
        batch = train_ds.sample_transitions(spec.batch_size, rng)
        out = worker.train_step(batch, rng, step)
        if step % cfg.run.log_every == 0 or step == start + cfg.run.worker_steps:
            metrics.write(step, out)
    meta = {
        "kind": "worker",
        "algorithm": spec.algorithm,
        "input_dim": train_ds.state_dim,
        "action_dim": train_ds.action_dim,
        "augmentation": spec.augmentation,
        "hidden": spec.hidden,
        "env": cfg.env.name,
        "manager_checkpoint": str(manager_path or ""),
        "manager_hash": manager_hash,
        "step": start + cfg.run.worker_steps,
    }
    return worker, meta


def run_dir_for(cfg: ExperimentConfig, agent: str, seed: int, out_root=None) -> str:
    mode = f"-{cfg.worker.algorithm}-{cfg.worker.augmentation}" if agent == "worker" else ""
    return os.path.join(
        out_root or cfg.run.out_dir, f"{agent}{mode}-{cfg.env.name}-s{seed}"
    )


def cmd_train(cfg: ExperimentConfig, agent: str, seed=None, out_root=None,
              manager_path=None, resume=None):
    """Train one agent for one seed; returns the run's output paths."""
    if agent not in AGENTS:
        raise ConfigError(f"unknown agent {agent!r}; choose from {AGENTS}")
    started = time.time()
    seed = cfg.run.seed if seed is None else seed
    if not cfg.dataset.path:
        raise ConfigError("training requires dataset.path")
    ds = load_dataset(cfg.dataset.path)
    out_dir = run_dir_for(cfg, agent, seed, out_root)
    os.makedirs(out_dir, exist_ok=True)
    metrics = MetricsWriter(os.path.join(out_dir, "metrics.csv"))
    try:
        if agent in FLAT_AGENTS:
            models, meta, _ = _train_flat(cfg, ds, agent, seed, metrics, resume=resume)
            named = models.named_params()
        elif agent == "manager":
            models, meta = _train_manager(cfg, ds, seed, metrics, resume=resume)
            named = models.named_params()
        else:
            models, meta = _train_worker(cfg, ds, seed, metrics, manager_path,
                                         resume=resume)
            named = models.named_params()
    except BaseException:
        metrics.abort()
        raise
    ckpt = os.path.join(out_dir, "checkpoint.ckpt")
    meta["seed"] = seed
    save_checkpoint(ckpt, named, meta=meta)
    atomic_write_text(os.path.join(out_dir, "checkpoint.meta.json"),
                      json.dumps(meta, indent=2, sort_keys=True))
    metrics.finish()
    write_run_manifest(
        out_dir, cfg, seed, {"dataset": cfg.dataset.path},
        [ckpt, metrics.path], started,
    )
    return {"dir": out_dir, "checkpoint": ckpt, "metrics": metrics.path}


def evaluate_flat(models: ModelSet, env_cfg, planner_cfg, episodes, seed):
    """Roll the offline agent with policy-shooting planning at every step."""
    env = make_env(env_cfg)
    master = np.random.SeedSequence((seed, 0xF1A7))
    returns, successes, scores, lengths = [], [], [], []
    for _ in range(episodes):
        rng = np.random.default_rng(master.spawn(1)[0])
        obs = env.reset(rng)
        total, success, t = 0.0, False, 0
        while True:
            a = act_offline(models, obs, planner_cfg, rng, mode="plan")
            obs, r, done, info = env.step(a)
            total += float(r)
            success = success or info["terminal"]
            t += 1
            if done:
                break
        returns.append(total)
        successes.append(success)
        scores.append(normalized_score(total, env_cfg))
        lengths.append(t)
    return workers_mod.EvalReport(
        returns=returns, successes=successes,
        score_mean=float(np.mean(scores)), score_std=float(np.std(scores)),
        episodes=episodes, seed=seed, mode="plan", scores=scores, lengths=lengths,
    )


def load_flat_from(path, cfg: ExperimentConfig) -> tuple[ModelSet, dict]:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") not in FLAT_AGENTS:
        raise ConfigError(f"{path} is not a flat-agent checkpoint")
    models = ModelSet(
        np.random.default_rng(0),
        meta["state_dim"],
        meta["action_dim"],
        latent_dim=meta["latent_dim"],
        hidden=meta["mlp_hidden"],
        enc_hidden=meta["enc_hidden"],
        log_std_range=(cfg.agent.log_std_min, cfg.agent.log_std_max),
    )
    models.load_params(arrays)
    return models, meta


def load_worker_from(path):
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "worker":
        raise ConfigError(f"{path} is not a worker checkpoint")
    spec = workers_mod.WorkerSpec(
        algorithm=meta["algorithm"], hidden=meta["hidden"],
        augmentation=meta["augmentation"],
    )
    worker = make_worker(
        np.random.default_rng(0), meta["input_dim"], meta["action_dim"], spec
    )
    for name, p in worker.named_params():
        p.data[...] = arrays[name]
    return worker, meta


def cmd_eval(cfg: ExperimentConfig, checkpoint, seed=None, results_csv=None,
             manager_path=None, episodes=None):
    """Evaluate one checkpoint; appends per-seed and aggregate result rows."""
    started = time.time()
    seed = cfg.run.seed if seed is None else seed
    episodes = episodes or cfg.run.eval_episodes
    if not os.path.exists(checkpoint):
        raise ConfigError(f"missing checkpoint: {checkpoint}")
    env_cfg = cfg.env_config()
    _, meta = load_checkpoint(checkpoint)
    kind = meta.get("kind")
    if kind in FLAT_AGENTS:
        models, meta = load_flat_from(checkpoint, cfg)
        planner_cfg = cfg.agent.planner()
        if kind == "iql-tdmpc" and planner_cfg.num_random_samples != 0:
            raise ConfigError("offline evaluation requires num_random_samples = 0")
        if kind == "tdmpc":
            from dataclasses import replace

            # full MPPI refinement for the online-lineage baseline
            n_pi, n_rand = tdmpc_planner_split(
                planner_cfg.num_pi_samples + planner_cfg.num_random_samples
            )
            planner_cfg = replace(
                planner_cfg, num_pi_samples=n_pi, num_random_samples=n_rand,
                bootstrap_mean=False,
            )
            report = _evaluate_tdmpc_mppi(models, env_cfg, planner_cfg, episodes, seed)
        else:
            report = evaluate_flat(models, env_cfg, planner_cfg, episodes, seed)
        algorithm, mode = kind, "plan"
    elif kind == "worker":
        worker, meta = load_worker_from(checkpoint)
        mode = meta["augmentation"]
        manager = None
        planner_cfg = None
        replan = None
        if mode == "intent":
            manager_path = manager_path or meta.get("manager_checkpoint")
            if not manager_path or not os.path.exists(manager_path):
                raise ConfigError(f"missing manager checkpoint: {manager_path!r}")
            if meta.get("manager_hash") and sha256_file(manager_path) != meta["manager_hash"]:
                raise ConfigError("manager checkpoint hash does not match worker sidecar")
            manager, mmeta = load_manager_from(manager_path)
            planner_cfg = cfg.manager.planner()
            replan = mmeta.get("replan_interval", cfg.manager.replan_interval)
        report = evaluate_worker(
            worker, env_cfg, mode, episodes=episodes, seed=seed, manager=manager,
            planner_cfg=planner_cfg, replan_interval=replan,
        )
        algorithm = meta["algorithm"]
    else:
        raise ConfigError(f"cannot evaluate checkpoint of kind {kind!r}")

    out = {
        "env": cfg.env.name,
        "algorithm": algorithm,
        "mode": mode,
        "seed": seed,
        "step": int(meta.get("step", 0)),
        "score_mean": report.score_mean,
        "score_std": report.score_std,
        "success_rate": report.success_rate,
        "episodes": report.episodes,
        "returns": report.returns,
        "scores": report.scores,
    }
    run_dir = os.path.dirname(os.path.abspath(checkpoint))
    atomic_write_text(
        os.path.join(run_dir, f"eval-s{seed}.json"), json.dumps(out, sort_keys=True)
    )
    if results_csv:
        row = {
            "env": cfg.env.name, "algorithm": algorithm, "mode": mode,
            "seed": seed, "step": out["step"], "config": cfg.config_hash(),
            "score": report.score_mean, "std": report.score_std,
        }
        append_result_rows(results_csv, [row])
        _append_aggregate(results_csv, cfg.env.name, algorithm, mode)
    write_run_manifest(run_dir, cfg, seed, {"checkpoint": checkpoint},
                       [os.path.join(run_dir, f"eval-s{seed}.json")], started)
    return report


def _evaluate_tdmpc_mppi(models, env_cfg, planner_cfg, episodes, seed):
    from offmbrl.planner import plan_mppi
    from offmbrl.autodiff import no_grad

    env = make_env(env_cfg)
    master = np.random.SeedSequence((seed, 0xF1A7))
    returns, successes, scores, lengths = [], [], [], []
    for _ in range(episodes):
        rng = np.random.default_rng(master.spawn(1)[0])
        obs = env.reset(rng)
        total, success, t = 0.0, False, 0
        while True:
            with no_grad():
                z = models.encode(obs[None]).data[0]
            a = plan_mppi(models, z, planner_cfg, rng).first_action
            obs, r, done, info = env.step(a)
            total += float(r)
            success = success or info["terminal"]
            t += 1
            if done:
                break
        returns.append(total)
        successes.append(success)
        scores.append(normalized_score(total, env_cfg))
        lengths.append(t)
    return workers_mod.EvalReport(
        returns=returns, successes=successes,
        score_mean=float(np.mean(scores)), score_std=float(np.std(scores)),
        episodes=episodes, seed=seed, mode="plan", scores=scores, lengths=lengths,
    )


def _append_aggregate(results_csv, env, algorithm, mode):
    rows = read_result_rows(results_csv)
    per_seed = [
        float(r["score"])
        for r in rows
        if r["env"] == env and r["algorithm"] == algorithm and r["mode"] == mode
        and r["seed"] != "aggregate"
    ]
    if len(per_seed) < 2:
        return
    agg = {
        "env": env, "algorithm": algorithm, "mode": mode, "seed": "aggregate",
        "step": 0, "config": "", "score": float(np.mean(per_seed)),
        "std": float(np.std(per_seed, ddof=1)),
    }
    append_result_rows(results_csv, [agg])


def welch_t_test(a, b):
    """Welch's unequal-variance t-test; returns (t, dof, p_two_sided)."""
    from scipy import stats

    res = stats.ttest_ind(a, b, equal_var=False)
    dof = getattr(res, "df", float(len(a) + len(b) - 2))
    return float(res.statistic), float(dof), float(res.pvalue)


def cmd_ablate(cfg: ExperimentConfig, run_root, seeds, results_csv, manager_paths=None):
    """Evaluate worker checkpoints for all three modes and compare them.

    Expects ``cmd_train`` layouts under ``run_root`` for each mode and seed.
    Emits per-(mode, seed) rows plus Welch t-test comparisons.
    """
    from dataclasses import replace

    scores = {mode: [] for mode in workers_mod.AUGMENT_MODES}
    for mode in workers_mod.AUGMENT_MODES:
        for seed in seeds:
            mode_cfg = replace(cfg, worker=replace(cfg.worker, augmentation=mode))
            ckpt = os.path.join(run_dir_for(mode_cfg, "worker", seed, run_root),
                                "checkpoint.ckpt")
            if not os.path.exists(ckpt):
                raise ConfigError(f"ablation requires trained worker: {ckpt}")
            manager_path = (manager_paths or {}).get(seed)
            report = cmd_eval(mode_cfg, ckpt, seed=seed, results_csv=results_csv,
                              manager_path=manager_path)
            scores[mode].append(report.score_mean)
    comparisons = {}
    for mode in ("intent", "random"):
        t, dof, p = welch_t_test(scores[mode], scores["none"])
        comparisons[f"{mode}_vs_none"] = {
            "t": t, "dof": dof, "p": p,
            "significant_at_0.05": bool(p < 0.05),
            "mean_diff": float(np.mean(scores[mode]) - np.mean(scores["none"])),
        }
    summary = {"scores": scores, "comparisons": comparisons}
    atomic_write_text(os.path.join(run_root, "ablation.json"),
                      json.dumps(summary, indent=2, sort_keys=True))
    return summary


def discover_manager_checkpoints(cfg: ExperimentConfig, root, seeds) -> dict:
    paths = {}
    for seed in seeds:
        p = os.path.join(run_dir_for(cfg, "manager", seed, root), "checkpoint.ckpt")
        if os.path.exists(p):
            paths[seed] = p
    return paths


def cmd_plot(csv_path, out_path):
    """Render metric curves (or score-vs-step points) from a CSV."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(csv_path, encoding="utf-8") as f:
        header = f.readline().strip().split(",")
        rows = [line.rstrip("\n").split(",") for line in f if line.strip()]
    fig, ax = plt.subplots(figsize=(8, 5))
    if "score" in header:
        si, xi = header.index("score"), header.index("step")
        gi = [header.index(c) for c in ("env", "algorithm", "mode")]
        series = {}
        for r in rows:
            if r[header.index("seed")] == "aggregate":
                continue
            key = "/".join(r[i] for i in gi)
            series.setdefault(key, []).append((float(r[xi]), float(r[si])))
        for key, pts in sorted(series.items()):
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], "o-", label=key)
        ax.set_ylabel("normalized score")
    else:
        xi = header.index("step")
        for ci, col in enumerate(header):
            if col == "step":
                continue
            ys = [float(r[ci]) for r in rows if r[ci]]
            xs = [float(r[xi]) for r in rows if r[ci]]
            ax.plot(xs, ys, label=col)
        ax.set_yscale("symlog")
        ax.set_ylabel("loss")
    ax.set_xlabel("step")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return out_path
