"""Latent world model: encoder/dynamics/reward/critics/value/policy bundle,
the per-step rollout losses, and the flat training step.

Sub-trajectories are encoded once, rolled through the dynamics model, and
every per-step loss term is discounted by rho^t. Targets always come from the
exponential-moving-average parameter copies.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from offmbrl import audit
from offmbrl.autodiff import (
    Adam,
    CategoricalPolicy,
    GaussianPolicy,
    Mlp,
    Tensor,
    categorical_mode_onehot,
    clip_grad_norm,
    ema_update,
    no_grad,
    squashed_gaussian_sample,
    squashed_mean,
    straight_through_onehot,
)
from offmbrl.autodiff import tensor as T
from offmbrl.dataset import SubTrajectoryBatch
from offmbrl.errors import ShapeError, TrainingError


@dataclass(frozen=True)
class LossWeights:
    consistency: float = 2.0   # c_f
    reward: float = 0.5        # c_R
    critic: float = 0.1        # c_Q
    rho: float = 0.5
    gamma: float = 0.99


@dataclass
class TrainMetrics:
    step: int
    values: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.values.items():
            if not np.isfinite(v):
                raise TrainingError(f"non-finite metric {k}={v} at step {self.step}")

    def __getitem__(self, key):
        return self.values[key]


class ModelSet:
    """All learned components of one agent plus their target copies.

    ``discrete=(L, C)`` swaps the squashed-Gaussian policy for L categorical
    blocks of C classes; dynamics/reward/critics then consume the flattened
    one-hot action of width L*C.
    """

    def __init__(self, rng, state_dim, action_dim, latent_dim, hidden=512,
                 enc_hidden=256, discrete=None, log_std_range=(-5.0, 2.0),
                 dtype=np.float32):
        self.state_dim = int(state_dim)
        self.latent_dim = int(latent_dim)
        self.discrete = discrete
        d = self.latent_dim
        if discrete is not None:
            blocks, classes = discrete
            self.action_dim = int(blocks) * int(classes)
        else:
            self.action_dim = int(action_dim)
        a = self.action_dim
        h, e = int(hidden), int(enc_hidden)
        self.encoder = Mlp(rng, (state_dim, e, d), dtype=dtype)
        self.dynamics = Mlp(rng, (d + a, h, h, d), dtype=dtype)
        self.reward = Mlp(rng, (d + a, h, h, 1), dtype=dtype)
        self.q1 = Mlp(rng, (d + a, h, h, 1), dtype=dtype)
        self.q2 = Mlp(rng, (d + a, h, h, 1), dtype=dtype)
        self.value = Mlp(rng, (d, h, h, 1), dtype=dtype)
        if discrete is not None:
            self.policy = CategoricalPolicy(rng, d, discrete[0], discrete[1], (h, h), dtype=dtype)
        else:
            self.policy = GaussianPolicy(rng, d, action_dim, (h, h), log_std_range, dtype=dtype)
        self.target_encoder = self.encoder.target_copy()
        self.target_q1 = self.q1.target_copy()
        self.target_q2 = self.q2.target_copy()
        self.target_value = self.value.target_copy()

    # -- forward helpers -------------------------------------------------------

    def encode(self, s, target=False) -> Tensor:
        st = s if isinstance(s, Tensor) else Tensor(np.asarray(s, dtype=np.float32))
        if st.shape[-1] != self.state_dim:
            raise ShapeError(f"state width {st.shape[-1]} != encoder input {self.state_dim}")
        return (self.target_encoder if target else self.encoder)(st)

    def q_pair(self, za: Tensor, target=False, frozen=False):
        if target:
            return self.target_q1(za), self.target_q2(za)
        return self.q1(za, frozen=frozen), self.q2(za, frozen=frozen)

    def q_min(self, za: Tensor, target=False, frozen=False) -> Tensor:
        q1, q2 = self.q_pair(za, target=target, frozen=frozen)
        return T.tminimum(q1, q2)

    def policy_action(self, z: Tensor, rng=None, mode="sample"):
        """An action array for bootstrapping: policy mean or a sample."""
        head = self.policy.head(z)
        if self.discrete is not None:
            if mode == "mean":
                return categorical_mode_onehot(head)
            return straight_through_onehot(head, rng).data
        if mode == "mean":
            return squashed_mean(head).data
        action, _ = squashed_gaussian_sample(head, rng)
        return action.data

    # -- parameter bookkeeping ----------------------------------------------------

    def model_components(self):
        return [
            ("encoder", self.encoder),
            ("dynamics", self.dynamics),
            ("reward", self.reward),
            ("q1", self.q1),
            ("q2", self.q2),
            ("value", self.value),
        ]

    def model_params(self):
        out = []
        for name, mlp in self.model_components():
            out.extend(mlp.named_params(name))
        return out

    def policy_params(self):
        return list(self.policy.named_params("policy"))

    def named_params(self):
        out = self.model_params() + self.policy_params()
        for name, mlp in (
            ("target_encoder", self.target_encoder),
            ("target_q1", self.target_q1),
            ("target_q2", self.target_q2),
            ("target_value", self.target_value),
        ):
            out.extend(mlp.named_params(name))
        return out

    def update_targets(self, momentum: float):
        for target, online in (
            (self.target_encoder, self.encoder),
            (self.target_q1, self.q1),
            (self.target_q2, self.q2),
            (self.target_value, self.value),
        ):
            for (_, tp), (_, op) in zip(target.named_params("t"), online.named_params("o")):
                ema_update([tp], [op], momentum)

    def load_params(self, arrays: dict):
        for name, p in self.named_params():
            if name not in arrays:
                raise ShapeError(f"checkpoint missing parameter {name!r}")
            if arrays[name].shape != p.data.shape:
                raise ShapeError(
                    f"checkpoint shape {arrays[name].shape} != {p.data.shape} for {name!r}"
                )
            p.data[...] = arrays[name]


def latent_rollout(models: ModelSet, z0: Tensor, actions) -> list[Tensor]:
    """Chain z through the dynamics model for each action; no re-encoding."""
    zs = [z0]
    z = z0
    for a in actions:
        at = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=np.float32))
        z = models.dynamics(T.concat([z, at], axis=-1))
        zs.append(z)
    return zs


def _bootstrap_targets(models: ModelSet, batch: SubTrajectoryBatch, gamma, rng,
                       policy_mode, critic_target):
    """TD targets for every step, computed off-tape from target networks.

    ``critic_target``: "tdmpc" bootstraps with the target critics at the
    policy action; "iql" bootstraps with the online state-value net.
    Terminal transitions bootstrap to zero; truncation bootstraps normally.
    """
    horizon, bsz = batch.horizon, batch.batch_size
    next_states = batch.states[1:].reshape(horizon * bsz, -1)
    with no_grad():
        z_next = models.encode(next_states, target=True)
        if critic_target == "iql":
            audit.record("q_target", "value_bootstrap")
            boot = models.value(z_next).data[:, 0]
        else:
            audit.record("q_target", f"policy_{policy_mode}")
            a_next = models.policy_action(z_next, rng=rng, mode=policy_mode)
            boot = models.q_min(T.concat([z_next, Tensor(a_next)], axis=-1), target=True).data[:, 0]
    boot = boot.reshape(horizon, bsz)
    live = 1.0 - batch.terminals
    ys = batch.rewards + gamma * live * boot
    return ys, z_next.data.reshape(horizon, bsz, -1)


def rollout_losses(models: ModelSet, batch: SubTrajectoryBatch, weights: LossWeights,
                   rng=None, critic_target="tdmpc", policy_mode="mean",
                   value_coef=0.0, expectile=None):
    """Model-side loss along the latent rollout.

    Returns (total, detached per-step latents, metrics dict). Components are
    rho^t-weighted sums over steps; the optional expectile value term keeps
    gradients confined to the value net.
    """
    horizon, bsz = batch.horizon, batch.batch_size
    ys, z_hat_next = _bootstrap_targets(
        models, batch, weights.gamma, rng, policy_mode, critic_target
    )
    # dynamics must chain step by step; every other head runs once over all steps
    z = models.encode(batch.states[0])
    zs, l_cons_steps = [z], []
    for t in range(horizon):
        za = T.concat([z, Tensor(batch.actions[t])], axis=-1)
        z = models.dynamics(za)
        l_cons_steps.append(T.square(z - Tensor(z_hat_next[t])).sum(axis=-1).mean())
        zs.append(z)

    rho_pows = weights.rho ** np.arange(horizon)
    row_w = Tensor(np.repeat(rho_pows / bsz, bsz).astype(np.float32))
    z_all = T.concat(zs[:-1], axis=0)
    a_all = batch.actions.reshape(horizon * bsz, -1)
    za_all = T.concat([z_all, Tensor(a_all)], axis=-1)

    r_hat = models.reward(za_all)[:, 0]
    l_reward = (row_w * T.square(r_hat - Tensor(batch.rewards.reshape(-1)))).sum()
    q1, q2 = models.q_pair(za_all)
    y = Tensor(ys.reshape(-1).astype(np.float32))
    l_critic = (row_w * (T.square(q1[:, 0] - y) + T.square(q2[:, 0] - y))).sum()
    l_consistency = None
    for t, term in enumerate(l_cons_steps):
        scaled = float(rho_pows[t]) * term
        l_consistency = scaled if l_consistency is None else l_consistency + scaled
    total = (
        weights.consistency * l_consistency
        + weights.reward * l_reward
        + weights.critic * l_critic
    )
    metrics = {
        "L_f": float(l_consistency.data),
        "L_R": float(l_reward.data),
        "L_Q": float(l_critic.data),
    }
    if value_coef > 0.0:
        from offmbrl.iql import expectile_loss  # local import: avoids a cycle

        with no_grad():
            q_det = models.q_min(
                T.concat([Tensor(z_all.data), Tensor(a_all)], axis=-1), target=True
            ).data[:, 0]
        v = models.value(Tensor(z_all.data))
        l_value = (row_w * expectile_loss(Tensor(q_det) - v[:, 0], expectile)).sum()
        total = total + value_coef * l_value
        metrics["L_V"] = float(l_value.data)
    if not np.isfinite(total.data):
        bad = [t for t in range(horizon) if not np.isfinite(l_cons_steps[t].data)]
        raise TrainingError(f"non-finite model loss (first bad rollout step: {bad[:1]})")
    zs_detached = [zt.data for zt in zs]
    return total, zs_detached, metrics


def tdmpc_policy_loss(models: ModelSet, zs_detached, weights: LossWeights) -> Tensor:
    """-rho^t-weighted Q at the policy mean; gradients reach only the policy."""
    horizon = len(zs_detached) - 1
    bsz = zs_detached[0].shape[0]
    z = Tensor(np.concatenate(zs_detached[:-1], axis=0))
    a = squashed_mean(models.policy.head(z))
    q = models.q_min(T.concat([z, a], axis=-1), frozen=True)
    row_w = Tensor(
        np.repeat(weights.rho ** np.arange(horizon) / bsz, bsz).astype(np.float32)
    )
    return -(row_w * q[:, 0]).sum()


def _grads_of(params):
    return [p.grad for _, p in params if p.grad is not None]


def optimizer_step(opt: Adam, params, clip_threshold: float) -> float:
    grads = _grads_of(params)
    norm = clip_grad_norm(grads, clip_threshold) if grads else 0.0
    opt.step()
    return min(norm, clip_threshold)


def train_step_tdmpc(models: ModelSet, batch: SubTrajectoryBatch, weights: LossWeights,
                     opt_model: Adam, opt_policy: Adam, rng, step: int, *,
                     clip=10.0, target_freq=2, target_momentum=0.01,
                     bootstrap_mean=False) -> TrainMetrics:
    """One flat TD-MPC update: model step, policy step, scheduled target EMA."""
    opt_model.zero_grad()
    opt_policy.zero_grad()
    policy_mode = "mean" if bootstrap_mean else "sample"
    total, zs, metrics = rollout_losses(
        models, batch, weights, rng=rng, critic_target="tdmpc", policy_mode=policy_mode
    )
    total.backward()
    grad_norm = optimizer_step(opt_model, opt_model.params, clip)

    pi_loss = tdmpc_policy_loss(models, zs, weights)
    pi_loss.backward()
    pi_norm = optimizer_step(opt_policy, opt_policy.params, clip)

    if step % target_freq == 0:
        models.update_targets(target_momentum)
    metrics.update(
        {"L_pi": float(pi_loss.data), "grad_norm": grad_norm, "pi_grad_norm": pi_norm}
    )
    return TrainMetrics(step=step, values=metrics)
