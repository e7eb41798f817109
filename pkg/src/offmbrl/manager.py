"""Temporally abstract manager: coarse-timescale training with discrete
inverse-dynamics actions, intent-embedding generation, and the auxiliary
state decoder used for visualization.

Abstract actions are straight-through block-one-hot samples from the inverse
dynamics net; the whole bundle trains end-to-end through them. Intents are
latent displacements g = f(z, a) - z. During worker training intents come
from inverse dynamics on the dataset; at evaluation they come from planning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from offmbrl import audit
from offmbrl.autodiff import (
    Adam,
    CategoricalHead,
    Mlp,
    Tensor,
    categorical_log_prob,
    no_grad,
    straight_through_onehot,
)
from offmbrl.autodiff import tensor as T
from offmbrl.dataset import OfflineDataset, SubTrajectoryBatch
from offmbrl.errors import ConfigError, ShapeError, TrainingError
from offmbrl.iql import IqlConfig, awr_bc_loss, awr_weights, expectile_loss
from offmbrl.planner import PlannerConfig, plan_policy_shooting
from offmbrl.tdmpc import LossWeights, ModelSet, TrainMetrics, optimizer_step


@dataclass(frozen=True)
class ManagerConfig:
    latent_dim: int = 10
    plan_horizon: int = 4
    coarseness: int = 8          # k environment steps per abstract step
    blocks: int = 8              # L categorical distributions
    classes: int = 10            # C categories each
    reward_scale: float = 1.0
    replan_interval: int = 1     # env steps between planner invocations
    train_decoder: bool = True

    def validate(self):
        if self.coarseness < 1 or self.plan_horizon < 1:
            raise ConfigError("coarseness and plan horizon must be >= 1")
        if self.reward_scale <= 0:
            raise ConfigError("reward scale must be positive")
        if self.replan_interval < 1:
            raise ConfigError("replan interval must be >= 1")
        return self

    @property
    def beta(self) -> float:
        """AWR inverse temperature adjusted to cancel the reward rescale."""
        return 3.0 / self.reward_scale


class ManagerModelSet(ModelSet):
    """ModelSet with a discrete policy plus inverse dynamics and decoder heads."""

    def __init__(self, rng, state_dim, mgr_cfg: ManagerConfig, hidden=512,
                 enc_hidden=256, dtype=np.float32):
        mgr_cfg.validate()
        super().__init__(
            rng,
            state_dim,
            action_dim=None,
            latent_dim=mgr_cfg.latent_dim,
            hidden=hidden,
            enc_hidden=enc_hidden,
            discrete=(mgr_cfg.blocks, mgr_cfg.classes),
            dtype=dtype,
        )
        d, h = mgr_cfg.latent_dim, int(hidden)
        self.mgr_cfg = mgr_cfg
        self.inverse = Mlp(rng, (2 * d, h, h, self.action_dim), dtype=dtype)
        self.decoder = Mlp(rng, (d, int(enc_hidden), state_dim), dtype=dtype)
        self.counters = {"inverse_dynamics": 0, "planner": 0}
        self._opt_decoder = None

    def model_components(self):
        # decoder deliberately excluded: it has its own optimizer and clip so
        # toggling it can never perturb the rest (not even via global clipping)
        return super().model_components() + [("inverse", self.inverse)]

    def decoder_params(self):
        return list(self.decoder.named_params("decoder"))

    def named_params(self):
        return super().named_params() + self.decoder_params()


def inverse_dynamics_head(manager: ManagerModelSet, z_from: Tensor, z_to: Tensor) -> CategoricalHead:
    cfg = manager.mgr_cfg
    logits = manager.inverse(T.concat([z_from, z_to], axis=-1))
    return CategoricalHead(logits.reshape(*logits.shape[:-1], cfg.blocks, cfg.classes))


def inverse_dynamics(manager: ManagerModelSet, z_from: Tensor, z_to: Tensor, rng) -> Tensor:
    """Straight-through abstract action summarizing the z_from -> z_to jump."""
    if z_from.shape[-1] != manager.latent_dim or z_to.shape[-1] != manager.latent_dim:
        raise ShapeError("inverse dynamics expects manager-latent inputs")
    head = inverse_dynamics_head(manager, z_from, z_to)
    return straight_through_onehot(head, rng)


def intent_from_action(manager: ManagerModelSet, z, abstract_action) -> np.ndarray:
    """g = f(z, a) - z, evaluated off-tape.

    The displacement is formed in float64 so g + z recovers f(z, a) exactly.
    """
    with no_grad():
        zt = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float32))
        at = (
            abstract_action
            if isinstance(abstract_action, Tensor)
            else Tensor(np.asarray(abstract_action, dtype=np.float32))
        )
        z_next = manager.dynamics(T.concat([zt, at], axis=-1))
        return z_next.data.astype(np.float64) - zt.data.astype(np.float64)


def train_time_intent(manager: ManagerModelSet, states, lookahead_states, rng) -> np.ndarray:
    """Batched dataset-side intents: encode, invert, displace."""
    manager.counters["inverse_dynamics"] += 1
    with no_grad():
        z = manager.encode(np.asarray(states, dtype=np.float32))
        z_look = manager.encode(np.asarray(lookahead_states, dtype=np.float32))
        action = inverse_dynamics(manager, z, z_look, rng)
        return intent_from_action(manager, z, action)


def eval_time_intent(manager: ManagerModelSet, state, planner_cfg: PlannerConfig, rng) -> np.ndarray:
    """Plan abstract actions by policy shooting and emit the first intent."""
    manager.counters["planner"] += 1
    with no_grad():
        z = manager.encode(np.asarray(state, dtype=np.float32)[None])
    result = plan_policy_shooting(manager, z.data[0], planner_cfg, rng)
    return intent_from_action(manager, z.data, result.first_action[None])[0]


def decode_state(manager: ManagerModelSet, latent) -> np.ndarray:
    """Auxiliary reconstruction head; never feeds gradients upstream."""
    with no_grad():
        zt = latent if isinstance(latent, Tensor) else Tensor(np.asarray(latent, dtype=np.float32))
        return manager.decoder(zt).data


def decode_intent_target(manager: ManagerModelSet, state, intent) -> np.ndarray:
    """Visualize an intent as the decoded implied target state, D(z + g)."""
    with no_grad():
        z = manager.encode(np.asarray(state, dtype=np.float32)[None]).data[0]
    return decode_state(manager, (z + np.asarray(intent, dtype=np.float32))[None])[0]


def manager_train_step(manager: ManagerModelSet, batch: SubTrajectoryBatch,
                       weights: LossWeights, iql_cfg: IqlConfig, opt_model: Adam,
                       opt_policy: Adam, rng, step: int, *, opt_decoder: Adam | None = None,
                       clip=10.0, target_freq=2, target_momentum=0.01) -> TrainMetrics:
    """One coarse-timescale update.

    Identical in structure to the flat offline step except that (i) actions
    are straight-through inverse-dynamics samples on consecutive true coarse
    latents, (ii) the behavioral-cloning term is per-block cross-entropy of
    the discrete policy against those samples, and (iii) rewards arrive
    pre-scaled by the reward scale factor.
    """
    cfg = manager.mgr_cfg
    iql_cfg.validate()
    opt_model.zero_grad()
    opt_policy.zero_grad()
    horizon, bsz = batch.horizon, batch.batch_size
    rewards = batch.rewards.astype(np.float32) * np.float32(cfg.reward_scale)

    flat_states = batch.states.reshape((horizon + 1) * bsz, -1)
    z_true = manager.encode(flat_states)
    with no_grad():
        z_target = manager.encode(flat_states, target=True).data.reshape(
            horizon + 1, bsz, -1
        )

    # abstract actions from consecutive true latents; gradients flow into the
    # encoder and the inverse net through the straight-through samples
    manager.counters["inverse_dynamics"] += 1
    actions_all = inverse_dynamics(manager, z_true[: horizon * bsz], z_true[bsz:], rng)

    z = z_true[:bsz]
    zs, l_cons_steps = [z], []
    for t in range(horizon):
        a_t = actions_all[t * bsz : (t + 1) * bsz]
        za = T.concat([z, a_t], axis=-1)
        z = manager.dynamics(za)
        l_cons_steps.append(T.square(z - Tensor(z_target[t + 1])).sum(axis=-1).mean())
        zs.append(z)

    rho_pows = weights.rho ** np.arange(horizon)
    row_w = Tensor(np.repeat(rho_pows / bsz, bsz).astype(np.float32))
    z_all = T.concat(zs[:-1], axis=0)
    za_all = T.concat([z_all, actions_all], axis=-1)

    r_hat = manager.reward(za_all)[:, 0]
    l_reward = (row_w * T.square(r_hat - Tensor(rewards.reshape(-1)))).sum()
    q1, q2 = manager.q_pair(za_all)
    z_next_target = z_target[1:].reshape(horizon * bsz, -1)
    with no_grad():
        if iql_cfg.critic_loss == "iql":
            audit.record("q_target", "value_bootstrap")
            boot = manager.value(Tensor(z_next_target)).data[:, 0]
        else:
            audit.record("q_target", "policy_mean")
            a_boot = manager.policy_action(Tensor(z_next_target), rng=rng, mode="mean")
            boot = manager.q_min(
                T.concat([Tensor(z_next_target), Tensor(a_boot)], axis=-1), target=True
            ).data[:, 0]
    live = 1.0 - batch.terminals.reshape(-1)
    y = Tensor(rewards.reshape(-1) + weights.gamma * live * boot)
    l_critic = (row_w * (T.square(q1[:, 0] - y) + T.square(q2[:, 0] - y))).sum()

    with no_grad():
        q_det = manager.q_min(
            T.concat([Tensor(z_all.data), Tensor(actions_all.data)], axis=-1), target=True
        ).data[:, 0]
    v = manager.value(Tensor(z_all.data))
    l_value = (row_w * expectile_loss(Tensor(q_det) - v[:, 0], iql_cfg.tau)).sum()

    l_consistency = None
    for t, term in enumerate(l_cons_steps):
        scaled = float(rho_pows[t]) * term
        l_consistency = scaled if l_consistency is None else l_consistency + scaled
    total = (
        weights.consistency * l_consistency
        + weights.reward * l_reward
        + weights.critic * l_critic
        + iql_cfg.value_loss_coef * l_value
    )
    m = {
        "L_f": float(l_consistency.data),
        "L_R": float(l_reward.data),
        "L_Q": float(l_critic.data),
        "L_V": float(l_value.data),
    }
    if not np.isfinite(total.data):
        raise TrainingError(f"non-finite manager loss at step {step}")
    total.backward()
    grad_norm = optimizer_step(opt_model, opt_model.params, clip)

    # reconstruction head: detached latents and a dedicated optimizer, so the
    # decoder can never perturb any other parameter trajectory
    if cfg.train_decoder:
        if opt_decoder is None:
            if manager._opt_decoder is None:
                manager._opt_decoder = Adam(manager.decoder_params(), lr=opt_model.lr)
            opt_decoder = manager._opt_decoder
        opt_decoder.zero_grad()
        recon = manager.decoder(Tensor(z_true.data))
        l_decoder = T.square(recon - Tensor(flat_states)).sum(axis=-1).mean()
        l_decoder.backward()
        optimizer_step(opt_decoder, opt_decoder.params, clip)
        m["L_D"] = float(l_decoder.data)

    # discrete AWR: per-block cross-entropy against the sampled one-hots
    with no_grad():
        adv = q_det - manager.value(Tensor(z_all.data)).data[:, 0]
    w = awr_weights(adv, cfg.beta, iql_cfg.adv_clip) * np.repeat(rho_pows, bsz) / bsz
    head = manager.policy.head(Tensor(z_all.data))
    audit.record("log_pi", "dataset")
    logp = categorical_log_prob(head, actions_all.data)
    pi_total = -(Tensor(w.astype(np.float32)) * logp).sum()
    pi_total.backward()
    pi_norm = optimizer_step(opt_policy, opt_policy.params, clip)

    if step % target_freq == 0:
        manager.update_targets(target_momentum)
    m.update({"L_pi": float(pi_total.data), "grad_norm": grad_norm, "pi_grad_norm": pi_norm})
    return TrainMetrics(step=step, values=m)


# -- dataset-side intent computation -------------------------------------------


def episode_lookahead_indices(ds: OfflineDataset, k: int):
    """(state_index, use_final_flag) pairs: lookahead clamps at episode tails.

    For every transition t the lookahead target is state s_{t+k}, or the
    episode's final state when t+k runs past the end.
    """
    n = ds.size
    look_idx = np.empty(n, dtype=np.int64)
    use_final = np.zeros(n, dtype=bool)
    for start, length in zip(ds.episode_starts, ds.episode_lengths):
        idx = np.arange(start, start + length)
        target = idx + k
        last = start + length - 1
        inside = target <= last
        look_idx[idx] = np.where(inside, target, last)
        use_final[idx] = ~inside
    return look_idx, use_final


def dataset_intents(manager: ManagerModelSet, ds: OfflineDataset, rng,
                    states=None) -> np.ndarray:
    """Intent for every transition state (or given states at those indices)."""
    k = manager.mgr_cfg.coarseness
    look_idx, use_final = episode_lookahead_indices(ds, k)
    lookahead = np.where(
        use_final[:, None], ds.next_states[look_idx], ds.states[look_idx]
    ).astype(np.float32)
    base = ds.states if states is None else states
    return train_time_intent(manager, base, lookahead, rng)
