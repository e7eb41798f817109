"""Off-the-shelf offline workers (BC, flat IQL, TD3-BC), intent/random state
augmentation, and the evaluation protocol.

Augmentation never touches a worker's losses: it only widens the observation
by d entries, appended during dataset loading and at evaluation time. The
flat IQL worker calls the exact loss primitives from the latent agent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from offmbrl.autodiff import (
    Adam,
    GaussianPolicy,
    Mlp,
    Tensor,
    no_grad,
    squashed_gaussian_sample,
    squashed_log_prob,
    squashed_mean,
)
from offmbrl.autodiff import tensor as T
from offmbrl.behavior import normalized_score
from offmbrl.dataset import OfflineDataset
from offmbrl.envs import EnvConfig, make_env
from offmbrl.errors import ConfigError
from offmbrl.iql import (
    IqlConfig,
    awr_bc_loss,
    awr_weights,
    iql_q_loss,
    iql_value_loss,
)
from offmbrl.manager import (
    ManagerModelSet,
    dataset_intents,
    eval_time_intent,
    train_time_intent,
)
from offmbrl.optimutil import ema_update_pairs
from offmbrl.planner import PlannerConfig

AUGMENT_MODES = ("none", "intent", "random")


@dataclass(frozen=True)
class WorkerSpec:
    algorithm: str = "bc"            # "bc" | "iql" | "td3bc"
    hidden: int = 256
    lr: float = 3e-4
    batch_size: int = 256
    gamma: float = 0.99
    augmentation: str = "none"
    action_clip: float = 0.99
    # iql worker
    tau: float = 0.9
    beta: float = 3.0
    adv_clip: float = 100.0
    # td3-bc worker
    bc_alpha: float = 2.5
    policy_freq: int = 2
    target_tau: float = 0.005
    policy_noise: float = 0.2
    noise_clip: float = 0.5

    def validate(self):
        if self.algorithm not in ("bc", "iql", "td3bc"):
            raise ConfigError(f"unknown worker algorithm {self.algorithm!r}")
        if self.augmentation not in AUGMENT_MODES:
            raise ConfigError(f"unknown augmentation mode {self.augmentation!r}")
        return self


# -- dataset augmentation ----------------------------------------------------------


def augment_dataset(ds: OfflineDataset, mode: str, rng, manager: ManagerModelSet | None = None,
                    chunk: int = 50_000) -> OfflineDataset:
    """Widen states with intent embeddings or uniform(0,1) noise.

    Both the s and s_next columns are augmented; s_next carries the intent of
    its own step index (the next one). mode="none" returns the input as-is.
    """
    if mode not in AUGMENT_MODES:
        raise ConfigError(f"unknown augmentation mode {mode!r}")
    if mode == "none":
        return ds
    if mode == "intent":
        if manager is None:
            raise ConfigError("intent augmentation requires a manager")
        if manager.state_dim != ds.state_dim:
            raise ConfigError(
                f"manager was trained on state_dim {manager.state_dim}, "
                f"dataset has {ds.state_dim}"
            )
        d = manager.latent_dim
        g_s = np.empty((ds.size, d), dtype=np.float32)
        for lo in range(0, ds.size, chunk):
            hi = min(lo + chunk, ds.size)
            view = _dataset_slice(ds, lo, hi)
            g_s[lo:hi] = dataset_intents(manager, view, rng)
        g_next = np.empty_like(g_s)
        for start, length in zip(ds.episode_starts, ds.episode_lengths):
            last = start + length - 1
            g_next[start:last] = g_s[start + 1 : last + 1]
            final_state = ds.next_states[last : last + 1]
            g_next[last] = train_time_intent(manager, final_state, final_state, rng)[0]
    else:
        d = manager.latent_dim if manager is not None else 10
        g_s = rng.random((ds.size, d)).astype(np.float32)
        g_next = rng.random((ds.size, d)).astype(np.float32)
    return OfflineDataset(
        states=np.concatenate([ds.states, g_s], axis=1),
        actions=ds.actions,
        rewards=ds.rewards,
        next_states=np.concatenate([ds.next_states, g_next], axis=1),
        dones=ds.dones,
        episode_lengths=ds.episode_lengths,
        env_name=ds.env_name,
        seed=ds.seed,
        augmented=True,
        terminals=ds.terminals,
    )


def _dataset_slice(ds: OfflineDataset, lo: int, hi: int) -> OfflineDataset:
    """A contiguous view whose episode table is cut to [lo, hi)."""
    lengths = []
    for start, length in zip(ds.episode_starts, ds.episode_lengths):
        s, e = max(start, lo), min(start + length, hi)
        if e > s:
            lengths.append(e - s)
    return OfflineDataset(
        states=ds.states[lo:hi],
        actions=ds.actions[lo:hi],
        rewards=ds.rewards[lo:hi],
        next_states=ds.next_states[lo:hi],
        dones=ds.dones[lo:hi],
        episode_lengths=np.array(lengths, dtype=np.int64),
        env_name=ds.env_name,
        seed=ds.seed,
        augmented=ds.augmented,
        terminals=ds.terminals[lo:hi],
    )


# -- worker algorithms ------------------------------------------------------------


class BcWorker:
    """Maximum-likelihood cloning with a squashed-Gaussian policy."""

    algorithm = "bc"

    def __init__(self, rng, obs_dim, action_dim, spec: WorkerSpec):
        self.spec = spec.validate()
        self.obs_dim = obs_dim
        h = spec.hidden
        self.policy = GaussianPolicy(rng, obs_dim, action_dim, (h, h))
        self.opt = Adam(self.policy.named_params("policy"), lr=spec.lr)

    def train_step(self, batch, rng, step) -> dict:
        self.opt.zero_grad()
        head = self.policy.head(Tensor(batch["s"]))
        logp = squashed_log_prob(head, batch["a"], clip=self.spec.action_clip)
        loss = -logp.mean()
        loss.backward()
        self.opt.step()
        return {"L_pi": float(loss.data)}

    def act(self, obs) -> np.ndarray:
        with no_grad():
            head = self.policy.head(Tensor(np.asarray(obs, dtype=np.float32)[None]))
            return squashed_mean(head).data[0]

    def named_params(self):
        return list(self.policy.named_params("policy"))


class IqlWorker:
    """Flat IQL on raw observations, built from the shared loss primitives."""

    algorithm = "iql"

    def __init__(self, rng, obs_dim, action_dim, spec: WorkerSpec):
        self.spec = spec.validate()
        self.obs_dim = obs_dim
        h = spec.hidden
        self.value = Mlp(rng, (obs_dim, h, h, 1))
        self.q1 = Mlp(rng, (obs_dim + action_dim, h, h, 1))
        self.q2 = Mlp(rng, (obs_dim + action_dim, h, h, 1))
        self.policy = GaussianPolicy(rng, obs_dim, action_dim, (h, h))
        self.target_q1 = self.q1.target_copy()
        self.target_q2 = self.q2.target_copy()
        self.opt_value = Adam(self.value.named_params("value"), lr=spec.lr)
        self.opt_q = Adam(
            list(self.q1.named_params("q1")) + list(self.q2.named_params("q2")), lr=spec.lr
        )
        self.opt_policy = Adam(self.policy.named_params("policy"), lr=spec.lr)

    def _q_target_min(self, s, a) -> np.ndarray:
        with no_grad():
            za = T.concat([Tensor(s), Tensor(a)], axis=-1)
            return np.minimum(self.target_q1(za).data[:, 0], self.target_q2(za).data[:, 0])

    def train_step(self, batch, rng, step) -> dict:
        s, a = batch["s"], batch["a"]
        q_t = self._q_target_min(s, a)

        self.opt_value.zero_grad()
        v = self.value(Tensor(s))[:, 0]
        l_v = iql_value_loss(q_t, v, self.spec.tau)
        l_v.backward()
        self.opt_value.step()

        self.opt_q.zero_grad()
        with no_grad():
            v_next = self.value(Tensor(batch["s_next"])).data[:, 0]
        y = batch["r"] + self.spec.gamma * (1.0 - batch["terminal"]) * v_next
        za = T.concat([Tensor(s), Tensor(a)], axis=-1)
        l_q = iql_q_loss(self.q1(za)[:, 0], self.q2(za)[:, 0], y)
        l_q.backward()
        self.opt_q.step()

        self.opt_policy.zero_grad()
        with no_grad():
            v_now = self.value(Tensor(s)).data[:, 0]
        w = awr_weights(q_t - v_now, self.spec.beta, self.spec.adv_clip)
        head = self.policy.head(Tensor(s))
        l_pi = awr_bc_loss(w, squashed_log_prob(head, a, clip=self.spec.action_clip))
        l_pi.backward()
        self.opt_policy.step()

        ema_update_pairs(
            [(self.target_q1, self.q1), (self.target_q2, self.q2)], self.spec.target_tau
        )
        return {"L_V": float(l_v.data), "L_Q": float(l_q.data), "L_pi": float(l_pi.data)}

    def act(self, obs) -> np.ndarray:
        with no_grad():
            head = self.policy.head(Tensor(np.asarray(obs, dtype=np.float32)[None]))
            return squashed_mean(head).data[0]

    def named_params(self):
        out = []
        for name, mlp in (
            ("value", self.value), ("q1", self.q1), ("q2", self.q2),
            ("target_q1", self.target_q1), ("target_q2", self.target_q2),
        ):
            out.extend(mlp.named_params(name))
        out.extend(self.policy.named_params("policy"))
        return out


class Td3bcWorker:
    """TD3 with a behavioral-cloning regularizer on the policy update."""

    algorithm = "td3bc"

    def __init__(self, rng, obs_dim, action_dim, spec: WorkerSpec):
        self.spec = spec.validate()
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        h = spec.hidden
        self.policy = Mlp(rng, (obs_dim, h, h, action_dim))
        self.q1 = Mlp(rng, (obs_dim + action_dim, h, h, 1))
        self.q2 = Mlp(rng, (obs_dim + action_dim, h, h, 1))
        self.target_policy = self.policy.target_copy()
        self.target_q1 = self.q1.target_copy()
        self.target_q2 = self.q2.target_copy()
        self.opt_q = Adam(
            list(self.q1.named_params("q1")) + list(self.q2.named_params("q2")), lr=spec.lr
        )
        self.opt_policy = Adam(self.policy.named_params("policy"), lr=spec.lr)

    def _policy_action(self, mlp: Mlp, s: Tensor, frozen=False) -> Tensor:
        return T.bounded_tanh(mlp(s, frozen=frozen))

    def train_step(self, batch, rng, step) -> dict:
        spec = self.spec
        s, a = batch["s"], batch["a"]
        with no_grad():
            noise = np.clip(
                spec.policy_noise * rng.standard_normal((len(a), self.action_dim)),
                -spec.noise_clip,
                spec.noise_clip,
            ).astype(np.float32)
            a_next = np.clip(
                self._policy_action(self.target_policy, Tensor(batch["s_next"])).data + noise,
                -1.0,
                1.0,
            )
            za = T.concat([Tensor(batch["s_next"]), Tensor(a_next)], axis=-1)
            q_next = np.minimum(self.target_q1(za).data[:, 0], self.target_q2(za).data[:, 0])
        y = batch["r"] + spec.gamma * (1.0 - batch["terminal"]) * q_next

        self.opt_q.zero_grad()
        za = T.concat([Tensor(s), Tensor(a)], axis=-1)
        l_q = iql_q_loss(self.q1(za)[:, 0], self.q2(za)[:, 0], y)
        l_q.backward()
        self.opt_q.step()

        metrics = {"L_Q": float(l_q.data)}
        if step % spec.policy_freq == 0:
            self.opt_policy.zero_grad()
            st = Tensor(s)
            pi = self._policy_action(self.policy, st)
            q_pi = self.q1(T.concat([st, pi], axis=-1), frozen=True)[:, 0]
            lam = spec.bc_alpha / max(float(np.abs(q_pi.data).mean()), 1e-6)
            l_pi = -lam * q_pi.mean() + T.square(pi - Tensor(a)).mean()
            l_pi.backward()
            self.opt_policy.step()
            ema_update_pairs(
                [
                    (self.target_policy, self.policy),
                    (self.target_q1, self.q1),
                    (self.target_q2, self.q2),
                ],
                spec.target_tau,
            )
            metrics["L_pi"] = float(l_pi.data)
        return metrics

    def act(self, obs) -> np.ndarray:
        with no_grad():
            st = Tensor(np.asarray(obs, dtype=np.float32)[None])
            return self._policy_action(self.policy, st).data[0]

    def named_params(self):
        out = []
        for name, mlp in (
            ("policy", self.policy), ("q1", self.q1), ("q2", self.q2),
            ("target_policy", self.target_policy),
            ("target_q1", self.target_q1), ("target_q2", self.target_q2),
        ):
            out.extend(mlp.named_params(name))
        return out


WORKER_CLASSES = {"bc": BcWorker, "iql": IqlWorker, "td3bc": Td3bcWorker}


def make_worker(rng, obs_dim, action_dim, spec: WorkerSpec):
    spec.validate()
    return WORKER_CLASSES[spec.algorithm](rng, obs_dim, action_dim, spec)


def train_worker(spec: WorkerSpec, ds: OfflineDataset, steps: int, seed: int,
                 callback=None):
    """Standard minibatch loop; the dataset must already be augmented."""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xB0C)))
    worker = make_worker(rng, ds.state_dim, ds.action_dim, spec)
    history = []
    for step in range(1, steps + 1):
        batch = ds.sample_transitions(spec.batch_size, rng)
        metrics = worker.train_step(batch, rng, step)
        if callback is not None:
            callback(step, metrics)
        history.append(metrics)
    return worker, history


# -- evaluation ----------------------------------------------------------------------


@dataclass
class EvalReport:
    returns: list[float]
    successes: list[bool]
    score_mean: float
    score_std: float
    episodes: int
    seed: int
    mode: str
    scores: list[float] = field(default_factory=list)
    lengths: list[int] = field(default_factory=list)

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.successes))


def evaluate_worker(worker, env_cfg: EnvConfig, mode: str, episodes: int = 100,
                    seed: int = 0, manager: ManagerModelSet | None = None,
                    planner_cfg: PlannerConfig | None = None,
                    replan_interval: int | None = None) -> EvalReport:
    """Roll evaluation episodes, appending the live intent / noise / nothing.

    Evaluation intents come from manager planning (never inverse dynamics)
    and are reused for ``replan_interval`` environment steps.
    """
    if mode not in AUGMENT_MODES:
        raise ConfigError(f"unknown augmentation mode {mode!r}")
    if mode == "intent":
        if manager is None or planner_cfg is None:
            raise ConfigError("intent evaluation requires a manager and planner config")
        if manager.state_dim + manager.latent_dim != worker.obs_dim:
            raise ConfigError(
                f"worker expects obs_dim {worker.obs_dim}, manager provides "
                f"{manager.state_dim}+{manager.latent_dim}"
            )
        if replan_interval is None:
            replan_interval = manager.mgr_cfg.replan_interval
    env = make_env(env_cfg)
    master = np.random.SeedSequence((seed, 0xE7A1))
    returns, successes, scores, lengths = [], [], [], []
    d = manager.latent_dim if manager is not None else 10
    for ep in range(episodes):
        rng = np.random.default_rng(master.spawn(1)[0])
        obs = env.reset(rng)
        total, success, t = 0.0, False, 0
        intent = None
        while True:
            if mode == "intent":
                if t % replan_interval == 0:
                    intent = eval_time_intent(manager, obs, planner_cfg, rng)
                obs_in = np.concatenate([obs, intent.astype(np.float32)])
            elif mode == "random":
                obs_in = np.concatenate([obs, rng.random(d).astype(np.float32)])
            else:
                obs_in = obs
            action = worker.act(obs_in)
            obs, r, done, info = env.step(action)
            total += float(r)
            success = success or info["terminal"]
            t += 1
            if done:
                break
        returns.append(total)
        successes.append(success)
        scores.append(normalized_score(total, env_cfg))
        lengths.append(t)
    return EvalReport(
        returns=returns,
        successes=successes,
        score_mean=float(np.mean(scores)),
        score_std=float(np.std(scores)),
        episodes=episodes,
        seed=seed,
        mode=mode,
        scores=scores,
        lengths=lengths,
    )
