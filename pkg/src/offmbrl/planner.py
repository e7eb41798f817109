"""Latent-space MPC: sequence scoring, MPPI refinement, policy shooting.

Policy shooting is the degenerate planner (one iteration, no random
samples); it shares the MPPI code path, so the two are bit-identical under a
shared seed. Candidate sequences can be injected for exhaustive oracle tests.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from offmbrl.autodiff import (
    Tensor,
    categorical_mode_onehot,
    no_grad,
    squashed_gaussian_sample,
    squashed_mean,
    straight_through_onehot,
)
from offmbrl.autodiff import tensor as T
from offmbrl.errors import ContractError
from offmbrl.tdmpc import ModelSet


@dataclass(frozen=True)
class PlannerConfig:
    horizon: int = 2
    num_pi_samples: int = 512
    num_random_samples: int = 0
    num_elites: int = 64
    iterations: int = 6
    momentum: float = 0.1
    temperature: float = 0.5
    gamma: float = 0.99
    std_init: float = 1.0
    std_floor: float = 1e-3
    selection: str = "softmax"      # "softmax" | "uniform"
    bootstrap_mean: bool = True

    def validate(self):
        if self.num_elites < 1:
            raise ContractError("need at least one elite")
        if self.num_pi_samples + self.num_random_samples < self.num_elites:
            raise ContractError("candidate pool smaller than elite size")
        if self.iterations < 1:
            raise ContractError("iterations must be >= 1")
        if self.selection not in ("softmax", "uniform"):
            raise ContractError(f"unknown elite selection {self.selection!r}")
        return self


@dataclass
class PlanResult:
    elite_sequences: np.ndarray   # (n_e, H, action_width)
    elite_scores: np.ndarray      # (n_e,), sorted non-increasing
    selected_index: int
    first_action: np.ndarray


def _terminal_action(models: ModelSet, z: Tensor, rng, bootstrap_mean: bool) -> np.ndarray:
    head = models.policy.head(z)
    if models.discrete is not None:
        if bootstrap_mean:
            return categorical_mode_onehot(head)
        return straight_through_onehot(head, rng).data
    if bootstrap_mean:
        return squashed_mean(head).data
    return squashed_gaussian_sample(head, rng)[0].data


def score_sequences(models: ModelSet, z0: np.ndarray, actions: np.ndarray,
                    cfg: PlannerConfig, rng=None) -> np.ndarray:
    """Discounted predicted rewards plus a terminal critic bootstrap.

    ``z0`` is one latent (d,); ``actions`` is (N, H, a). Scores are
    accumulated in float64 off-tape.
    """
    n, horizon = actions.shape[0], actions.shape[1]
    with no_grad():
        z = Tensor(np.broadcast_to(z0.astype(np.float32), (n, z0.shape[-1])).copy())
        total = np.zeros(n, dtype=np.float64)
        disc = 1.0
        for t in range(horizon):
            za = T.concat([z, Tensor(actions[:, t])], axis=-1)
            total += disc * models.reward(za).data[:, 0].astype(np.float64)
            z = models.dynamics(za)
            disc *= cfg.gamma
        a_term = _terminal_action(models, z, rng, cfg.bootstrap_mean)
        q = models.q_min(T.concat([z, Tensor(a_term)], axis=-1)).data[:, 0]
        total += disc * q.astype(np.float64)
    return total


def score_sequence(models: ModelSet, z0: np.ndarray, actions: np.ndarray,
                   cfg: PlannerConfig, rng=None) -> float:
    """Single-sequence convenience wrapper around ``score_sequences``."""
    return float(score_sequences(models, z0, actions[None], cfg, rng=rng)[0])


def policy_rollout_sequences(models: ModelSet, z0: np.ndarray, n: int, horizon: int,
                             rng) -> np.ndarray:
    """Sample n sequences by alternating the policy and the dynamics model."""
    with no_grad():
        z = Tensor(np.broadcast_to(z0.astype(np.float32), (n, z0.shape[-1])).copy())
        steps = []
        for _ in range(horizon):
            head = models.policy.head(z)
            if models.discrete is not None:
                a = straight_through_onehot(head, rng)
            else:
                a, _ = squashed_gaussian_sample(head, rng)
            steps.append(a.data)
            z = models.dynamics(T.concat([z, a], axis=-1))
    return np.stack(steps, axis=1)


def _softmax_weights(scores: np.ndarray, temperature: float) -> np.ndarray:
    shifted = (scores - scores.max()) / max(temperature, 1e-8)
    w = np.exp(shifted)
    return w / w.sum()


def _elite_update(mean, std, elite_actions, elite_scores, cfg: PlannerConfig):
    """Score-softmax elite statistics; mean blended with itself via momentum."""
    w = _softmax_weights(elite_scores, cfg.temperature)
    new_mean = np.einsum("e,eha->ha", w, elite_actions)
    spread = elite_actions - new_mean[None]
    new_std = np.sqrt(np.einsum("e,eha->ha", w, spread * spread))
    mean = cfg.momentum * mean + (1.0 - cfg.momentum) * new_mean
    std = np.maximum(new_std, cfg.std_floor)
    return mean, std


def select_action(elite_sequences, elite_scores, cfg: PlannerConfig, rng):
    """Pick one elite (score-softmax or uniform) and return its first action."""
    n = len(elite_scores)
    if n == 0:
        raise ContractError("empty elite set")
    if cfg.selection == "uniform":
        probs = np.full(n, 1.0 / n)
    else:
        probs = _softmax_weights(elite_scores, cfg.temperature)
    idx = int(rng.choice(n, p=probs))
    return idx, elite_sequences[idx, 0].copy()


def plan_mppi(models: ModelSet, z0: np.ndarray, cfg: PlannerConfig, rng,
              inject: np.ndarray | None = None) -> PlanResult:
    """Iterative Gaussian refinement over action sequences in latent space.

    Policy rollouts are generated once and kept in every iteration's pool;
    random sequences are redrawn from the refreshed Gaussian. ``inject``
    appends fixed candidate sequences to every pool (oracle hooks).
    """
    cfg.validate()
    z0 = np.asarray(z0, dtype=np.float32).reshape(-1)
    discrete = models.discrete is not None
    if discrete and cfg.num_random_samples > 0:
        raise ContractError("random Gaussian sequences are undefined for discrete actions")
    action_width = models.action_dim
    pools = []
    if cfg.num_pi_samples > 0:
        pools.append(
            policy_rollout_sequences(models, z0, cfg.num_pi_samples, cfg.horizon, rng)
        )
    if inject is not None:
        inject = np.asarray(inject, dtype=np.float32)
        if inject.ndim != 3 or inject.shape[1] != cfg.horizon or inject.shape[2] != action_width:
            raise ContractError(f"injected candidates must be (K, {cfg.horizon}, {action_width})")

    mean = np.zeros((cfg.horizon, action_width), dtype=np.float64)
    std = np.full((cfg.horizon, action_width), cfg.std_init, dtype=np.float64)
    elite_actions = elite_scores = None
    for _ in range(cfg.iterations):
        candidates = list(pools)
        if cfg.num_random_samples > 0:
            noise = rng.standard_normal((cfg.num_random_samples, cfg.horizon, action_width))
            rand = np.clip(mean[None] + std[None] * noise, -1.0, 1.0).astype(np.float32)
            candidates.append(rand)
        if inject is not None:
            candidates.append(inject)
        pool = np.concatenate(candidates, axis=0)
        scores = score_sequences(models, z0, pool, cfg, rng=rng)
        order = np.argsort(-scores, kind="stable")[: cfg.num_elites]
        elite_actions = pool[order]
        elite_scores = scores[order]
        if not discrete:
            mean, std = _elite_update(mean, std, elite_actions, elite_scores, cfg)
    idx, first = select_action(elite_actions, elite_scores, cfg, rng)
    return PlanResult(
        elite_sequences=elite_actions,
        elite_scores=elite_scores,
        selected_index=idx,
        first_action=first,
    )


def plan_policy_shooting(models: ModelSet, z0: np.ndarray, cfg: PlannerConfig,
                         rng, inject: np.ndarray | None = None) -> PlanResult:
    """One scoring pass over policy samples only: MPPI with no refinement."""
    if cfg.num_random_samples != 0:
        raise ContractError("policy shooting requires num_random_samples == 0")
    if models.discrete is None and cfg.num_pi_samples > 1:
        head = models.policy.head(Tensor(z0.astype(np.float32)[None]))
        if float(np.exp(head.log_std.data).max()) < 1e-2:
            warnings.warn(
                "policy is effectively deterministic; shooting samples will collapse",
                stacklevel=2,
            )
    return plan_mppi(models, z0, replace(cfg, iterations=1), rng, inject=inject)
