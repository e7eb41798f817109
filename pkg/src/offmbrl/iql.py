"""Offline extension of the latent agent: expectile value learning, the
value-bootstrapped critic variant, and advantage-weighted policy regression
with exp-weight clipping and an entropy bonus.

The loss primitives here are shared verbatim by the flat IQL worker.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from offmbrl import audit
from offmbrl.autodiff import (
    Adam,
    Tensor,
    categorical_log_prob,
    no_grad,
    squashed_gaussian_sample,
    squashed_log_prob,
    squashed_mean,
)
from offmbrl.autodiff import tensor as T
from offmbrl.dataset import SubTrajectoryBatch
from offmbrl.errors import ConfigError, ContractError
from offmbrl.planner import PlannerConfig, plan_policy_shooting
from offmbrl.tdmpc import (
    LossWeights,
    ModelSet,
    TrainMetrics,
    optimizer_step,
    rollout_losses,
)


@dataclass(frozen=True)
class IqlConfig:
    tau: float = 0.9
    beta: float = 3.0
    adv_clip: float = 100.0          # cap on exp(beta * advantage)
    value_loss_coef: float = 0.1     # c_V
    critic_loss: str = "tdmpc"       # "tdmpc" | "iql"
    action_clip: float = 0.99
    entropy_bonus: float = 0.1

    def validate(self):
        if not 0.5 < self.tau < 1.0:
            raise ConfigError(f"expectile tau must lie in (0.5, 1), got {self.tau}")
        if self.beta <= 0:
            raise ConfigError("inverse temperature beta must be positive")
        if self.adv_clip <= 0:
            raise ConfigError("advantage weight cap must be positive")
        if self.critic_loss not in ("tdmpc", "iql"):
            raise ConfigError(f"unknown critic loss variant {self.critic_loss!r}")
        return self


# -- loss primitives (shared with the flat IQL worker) -------------------------


def expectile_loss(u: Tensor, tau: float) -> Tensor:
    """Asymmetric squared loss |tau - 1[u<0]| * u^2, elementwise."""
    if not 0.0 < tau < 1.0:
        raise ContractError(f"tau must lie in (0, 1), got {tau}")
    w = np.where(u.data < 0, 1.0 - tau, tau).astype(u.dtype.type)
    return Tensor(w) * T.square(u)


def iql_value_loss(q_target: np.ndarray, v: Tensor, tau: float) -> Tensor:
    """Mean expectile loss of (Q_target - V); gradients reach V only."""
    return expectile_loss(Tensor(np.asarray(q_target, dtype=v.dtype.type)) - v, tau).mean()


def iql_q_loss(q1: Tensor, q2: Tensor, target: np.ndarray) -> Tensor:
    """Both twin critics regress the same one-step target."""
    y = Tensor(np.asarray(target, dtype=q1.dtype.type))
    return (T.square(q1 - y) + T.square(q2 - y)).mean()


def awr_weights(advantage: np.ndarray, beta: float, clip: float) -> np.ndarray:
    """w = min(exp(beta * A), clip); computed off-tape, never differentiated."""
    return np.minimum(np.exp(beta * np.asarray(advantage, dtype=np.float64)), clip)


def awr_bc_loss(weights: np.ndarray, log_prob: Tensor) -> Tensor:
    """Weighted behavioral cloning: -E[w * log pi(a|s)]."""
    return -(Tensor(weights.astype(log_prob.dtype.type)) * log_prob).mean()


# -- latent-agent losses --------------------------------------------------------


def latent_advantage(models: ModelSet, z_data: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """A = min twin target Q(z, a) - V(z), off-tape."""
    with no_grad():
        z = Tensor(z_data)
        za = T.concat([z, Tensor(actions)], axis=-1)
        q = models.q_min(za, target=True).data[:, 0]
        v = models.value(z).data[:, 0]
    return q - v


def value_loss(models: ModelSet, z_data: np.ndarray, actions: np.ndarray, tau: float) -> Tensor:
    """Expectile regression of V toward target-critic values at dataset actions."""
    with no_grad():
        za = T.concat([Tensor(z_data), Tensor(actions)], axis=-1)
        q = models.q_min(za, target=True).data[:, 0]
    v = models.value(Tensor(z_data))[:, 0]
    return iql_value_loss(q, v, tau)


def q_loss_iql(models: ModelSet, z: Tensor, actions: np.ndarray, rewards: np.ndarray,
               z_next_data: np.ndarray, terminal: np.ndarray, gamma: float) -> Tensor:
    """One-step TD toward r + gamma * V(z'); V is evaluated off-tape."""
    with no_grad():
        v_next = models.value(Tensor(z_next_data)).data[:, 0]
    audit.record("q_target", "value_bootstrap")
    y = rewards + gamma * (1.0 - terminal) * v_next
    za = T.concat([z, Tensor(actions)], axis=-1)
    q1, q2 = models.q_pair(za)
    return iql_q_loss(q1[:, 0], q2[:, 0], y)


def awr_policy_loss(models: ModelSet, z_data: np.ndarray, actions: np.ndarray,
                    cfg: IqlConfig, rng, row_weights: np.ndarray | None = None) -> Tensor:
    """AWR policy regression at detached latents; gradients reach pi only.

    Continuous heads add the entropy bonus via one fresh reparameterized
    sample; categorical heads use per-block cross-entropy with no bonus.
    ``row_weights`` multiplies per-row losses (rho^t over stacked steps).
    """
    adv = latent_advantage(models, z_data, actions)
    w = awr_weights(adv, cfg.beta, cfg.adv_clip)
    if row_weights is not None:
        w = w * row_weights
    head = models.policy.head(Tensor(z_data))
    if models.discrete is not None:
        audit.record("log_pi", "dataset")
        logp = categorical_log_prob(head, actions)
        return awr_bc_loss(w, logp)
    audit.record("log_pi", "dataset")
    logp = squashed_log_prob(head, actions, clip=cfg.action_clip)
    if not np.all(np.isfinite(logp.data)):
        raise ContractError("non-finite log-probability of clipped dataset action")
    loss = awr_bc_loss(w, logp)
    if cfg.entropy_bonus > 0:
        audit.record("log_pi", "entropy_self_sample")
        _, logp_fresh = squashed_gaussian_sample(head, rng)
        if row_weights is not None:
            ent = (Tensor(row_weights.astype(np.float32)) * logp_fresh).mean()
        else:
            ent = logp_fresh.mean()
        loss = loss + cfg.entropy_bonus * ent
    return loss


def train_step_iql_tdmpc(models: ModelSet, batch: SubTrajectoryBatch, weights: LossWeights,
                         cfg: IqlConfig, opt_model: Adam, opt_policy: Adam, rng,
                         step: int, *, clip=10.0, target_freq=2,
                         target_momentum=0.01) -> TrainMetrics:
    """One offline update: model losses with the expectile value term, then
    the AWR policy step, then scheduled target averaging."""
    cfg.validate()
    opt_model.zero_grad()
    opt_policy.zero_grad()
    total, zs, metrics = rollout_losses(
        models,
        batch,
        weights,
        rng=rng,
        critic_target="iql" if cfg.critic_loss == "iql" else "tdmpc",
        policy_mode="mean",
        value_coef=cfg.value_loss_coef,
        expectile=cfg.tau,
    )
    total.backward()
    grad_norm = optimizer_step(opt_model, opt_model.params, clip)

    horizon, bsz = batch.horizon, batch.batch_size
    z_all = np.concatenate(zs[:-1], axis=0)
    a_all = batch.actions.reshape(horizon * bsz, -1)
    rho_rows = np.repeat(weights.rho ** np.arange(horizon), bsz)
    pi_total = awr_policy_loss(models, z_all, a_all, cfg, rng, row_weights=rho_rows)
    pi_total.backward()
    pi_norm = optimizer_step(opt_policy, opt_policy.params, clip)

    if step % target_freq == 0:
        models.update_targets(target_momentum)
    metrics.update(
        {"L_pi": float(pi_total.data), "grad_norm": grad_norm, "pi_grad_norm": pi_norm}
    )
    return TrainMetrics(step=step, values=metrics)


def act_offline(models: ModelSet, state: np.ndarray, planner_cfg: PlannerConfig, rng,
                mode: str = "plan") -> np.ndarray:
    """Plan mode shoots policy samples from z = h(s); policy mode is tanh(mu)."""
    with no_grad():
        z = models.encode(np.asarray(state, dtype=np.float32)[None])
    if mode == "policy":
        with no_grad():
            return squashed_mean(models.policy.head(z)).data[0]
    if mode != "plan":
        raise ContractError(f"unknown act mode {mode!r}")
    if planner_cfg.num_random_samples != 0:
        raise ContractError("offline planning requires num_random_samples == 0")
    result = plan_policy_shooting(models, z.data[0], planner_cfg, rng)
    return result.first_action
