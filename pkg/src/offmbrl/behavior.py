"""Scripted behavior policies, offline dataset generation, and score references.

Behavior specs are per-episode mixtures of three controller families:
waypoint-following toward the goal (expert, optionally noisy), waypoint
following toward random cells (partial-route "play"), and a persistent
random walk.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from offmbrl.dataset import OfflineDataset
from offmbrl.envs import EnvConfig, MazeEnv, RunnerEnv, bfs_distance_field, make_env
from offmbrl.errors import ConfigError, GenerationError


# -- controllers ----------------------------------------------------------------


class RouteController:
    """Follows the shortest cell route to a target cell with optional noise.

    With ``retarget`` the controller wanders between cells ("play" style);
    ``goal_bias`` is the per-retarget probability of heading for the goal.
    """

    def __init__(self, env: MazeEnv, target_cell, noise=0.0, speed=0.9, retarget=False,
                 goal_bias=0.0):
        self.env = env
        self.noise = noise
        self.speed = speed
        self.retarget = retarget
        self.goal_bias = goal_bias
        self._set_target(target_cell)

    def _sample_target(self, rng):
        if self.goal_bias > 0 and rng.random() < self.goal_bias:
            return self.env.goal_cell
        # wandering legs stay off the goal's approach corridor; deliberate
        # goal legs are governed by goal_bias alone
        pool = getattr(self, "_wander_pool", None)
        if pool is None:
            goal_dist = bfs_distance_field(self.env.walls, self.env.goal_cell)
            free = self.env.free_cells
            pool = free[goal_dist[free[:, 0], free[:, 1]] > 2]
            self._wander_pool = pool
        r, c = pool[rng.integers(len(pool))]
        return (r, c)

    def _set_target(self, cell):
        self.target_cell = (int(cell[0]), int(cell[1]))
        self.dist = bfs_distance_field(self.env.walls, self.target_cell)

    def _check_reachable(self, pos):
        cell = (int(np.floor(pos[1])), int(np.floor(pos[0])))
        if not np.isfinite(self.dist[cell]):
            raise GenerationError(
                f"waypoint cell {self.target_cell} unreachable from {cell}"
            )

    def act(self, rng) -> np.ndarray:
        env = self.env
        pos, vel = env.raw_pos, env.raw_vel
        self._check_reachable(pos)
        cell = (int(np.floor(pos[1])), int(np.floor(pos[0])))
        target_center = np.array([self.target_cell[1] + 0.5, self.target_cell[0] + 0.5])
        if cell == self.target_cell and np.linalg.norm(pos - target_center) < 0.4:
            if self.retarget:
                self._set_target(self._sample_target(rng))
            else:
                # hold position at the target
                a = -vel / (env.cfg.accel * 2.0)
                return np.clip(a, -1.0, 1.0)
        best, best_d = cell, self.dist[cell]
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            rr, cc = cell[0] + dr, cell[1] + dc
            if 0 <= rr < env.height and 0 <= cc < env.width and self.dist[rr, cc] < best_d:
                best, best_d = (rr, cc), self.dist[rr, cc]
        waypoint = np.array([best[1] + 0.5, best[0] + 0.5])
        delta = waypoint - pos
        norm = np.linalg.norm(delta)
        v_des = delta / max(norm, 1e-6) * min(self.speed, 0.9 * norm)
        a = (v_des / env.cfg.damping - vel) / env.cfg.accel
        if self.noise > 0:
            a = a + self.noise * rng.standard_normal(2)
        return np.clip(a, -1.0, 1.0)


class RandomWalkController:
    """Uniform actions held for a few steps, for diffusive coverage."""

    def __init__(self, env, hold_prob=0.15, jitter=0.25, scale=0.65):
        self.env = env
        self.hold_prob = hold_prob
        self.jitter = jitter
        self.scale = scale
        self._held = None

    def act(self, rng) -> np.ndarray:
        m = self.env.action_dim
        if self._held is None or rng.random() < self.hold_prob:
            self._held = rng.uniform(-self.scale, self.scale, size=m)
        return np.clip(self._held + self.jitter * rng.standard_normal(m), -1.0, 1.0)


class SpeedTrackController:
    """Runner controller chasing a speed target (the env's or its own)."""

    def __init__(self, env: RunnerEnv, target=None, noise=0.0):
        self.env = env
        self.target = target
        self.noise = noise

    def act(self, rng) -> np.ndarray:
        target = self.env.target_speed if self.target is None else self.target
        v = self.env.raw_vel
        a = (target / self.env.cfg.damping - v) / self.env.cfg.accel
        if self.noise > 0:
            a = a + self.noise * rng.standard_normal(1)
        return np.clip(np.atleast_1d(a), -1.0, 1.0)


# -- behavior mixtures ------------------------------------------------------------


@dataclass(frozen=True)
class MixtureComponent:
    kind: str      # "expert" | "partial" | "random"
    weight: float
    noise: float = 0.0
    goal_bias: float = 0.02


@dataclass(frozen=True)
class BehaviorSpec:
    components: tuple[MixtureComponent, ...]

    def validate(self):
        total = sum(c.weight for c in self.components)
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"mixture weights sum to {total}, expected 1")
        return self


MIXTURES = {
    # mixed-quality "play" style: mostly noisy wandering between random
    # targets, a sizable random-walk tail
    "play": BehaviorSpec(
        (
            MixtureComponent("partial", 0.6, noise=0.3),
            MixtureComponent("random", 0.4),
        )
    ),
    "expert": BehaviorSpec((MixtureComponent("expert", 1.0, noise=0.05),)),
    "random": BehaviorSpec((MixtureComponent("random", 1.0),)),
}


def behavior_spec(name: str) -> BehaviorSpec:
    if name not in MIXTURES:
        raise ConfigError(f"unknown behavior mixture {name!r}; choose from {sorted(MIXTURES)}")
    return MIXTURES[name].validate()


def _make_controller(env, component: MixtureComponent, rng):
    if isinstance(env, RunnerEnv):
        if component.kind == "expert":
            return SpeedTrackController(env, noise=component.noise)
        if component.kind == "partial":
            lo, hi = env.cfg.target_speed_range
            own = float(lo + (hi - lo) * rng.random())
            return SpeedTrackController(env, target=own, noise=max(component.noise, 0.1))
        return RandomWalkController(env)
    if component.kind == "expert":
        return RouteController(env, env.goal_cell, noise=component.noise)
    if component.kind == "partial":
        ctrl = RouteController(
            env, env.goal_cell, noise=component.noise, retarget=True,
            goal_bias=component.goal_bias,
        )
        ctrl._set_target(ctrl._sample_target(rng))
        return ctrl
    if component.kind == "random":
        return RandomWalkController(env)
    raise ConfigError(f"unknown controller kind {component.kind!r}")


def _pick_component(spec: BehaviorSpec, rng) -> MixtureComponent:
    u = rng.random()
    acc = 0.0
    for comp in spec.components:
        acc += comp.weight
        if u < acc:
            return comp
    return spec.components[-1]


# -- dataset generation -----------------------------------------------------------


def generate_dataset(env_cfg: EnvConfig, spec, n_transitions: int, seed: int) -> OfflineDataset:
    """Roll scripted episodes until ``n_transitions`` are stored.

    Fully deterministic in (env_cfg, spec, n_transitions, seed); per-episode
    RNG streams are spawned from the master seed so episode order is
    canonical.
    """
    if isinstance(spec, str):
        spec = behavior_spec(spec)
    spec.validate()
    env = make_env(env_cfg)
    master = np.random.SeedSequence(seed)
    states, actions, rewards, next_states, dones, terminals, lengths = (
        [], [], [], [], [], [], [],
    )
    total = 0
    episode = 0
    while total < n_transitions:
        rng = np.random.default_rng(master.spawn(1)[0])
        obs = env.reset(rng)
        component = _pick_component(spec, rng)
        controller = _make_controller(env, component, rng)
        length = 0
        while True:
            a = np.asarray(controller.act(rng), dtype=np.float32).reshape(env.action_dim)
            a = np.clip(a, -1.0, 1.0)
            nxt, r, done, info = env.step(a)
            states.append(obs)
            actions.append(a)
            rewards.append(r)
            next_states.append(nxt)
            dones.append(1.0 if done else 0.0)
            terminals.append(info["terminal"])
            obs = nxt
            length += 1
            total += 1
            if done or total >= n_transitions:
                break
        lengths.append(length)
        episode += 1
    return OfflineDataset(
        states=np.array(states, dtype=np.float32),
        actions=np.array(actions, dtype=np.float32),
        rewards=np.array(rewards, dtype=np.float32),
        next_states=np.array(next_states, dtype=np.float32),
        dones=np.array(dones, dtype=np.float32),
        episode_lengths=np.array(lengths, dtype=np.int64),
        env_name=env_cfg.name,
        seed=seed,
        terminals=np.array(terminals, dtype=bool),
    )


# -- normalized scores --------------------------------------------------------------


REFERENCE_SEED = 1234
REFERENCE_EPISODES = 100
_ref_cache: dict[tuple, tuple[float, float]] = {}


def _rollout_return(env, controller_factory, rng) -> float:
    obs = env.reset(rng)
    controller = controller_factory()
    total = 0.0
    while True:
        a = controller.act(rng)
        obs, r, done, _ = env.step(a)
        total += float(r)
        if done:
            return total


def reference_returns(env_cfg: EnvConfig) -> tuple[float, float]:
    """(random, expert) mean returns over 100 scripted reference episodes."""
    key = (env_cfg.name, env_cfg.reward_mode, env_cfg.max_steps, env_cfg.start_mode)
    if key in _ref_cache:
        return _ref_cache[key]
    env = make_env(env_cfg)
    rng = np.random.default_rng(REFERENCE_SEED)
    rand_returns = [
        _rollout_return(env, lambda: RandomWalkController(env), rng)
        for _ in range(REFERENCE_EPISODES)
    ]
    if isinstance(env, RunnerEnv):
        expert_factory = lambda: SpeedTrackController(env)
    else:
        expert_factory = lambda: RouteController(env, env.goal_cell)
    expert_returns = [
        _rollout_return(env, expert_factory, rng) for _ in range(REFERENCE_EPISODES)
    ]
    refs = (float(np.mean(rand_returns)), float(np.mean(expert_returns)))
    if refs[1] <= refs[0]:
        raise ConfigError(
            f"{env_cfg.name}: expert reference {refs[1]:.3f} does not beat random {refs[0]:.3f}"
        )
    _ref_cache[key] = refs
    return refs


def normalized_score(raw_return: float, env_cfg: EnvConfig) -> float:
    """100 * (raw - random_ref) / (expert_ref - random_ref)."""
    random_ref, expert_ref = reference_returns(env_cfg)
    return 100.0 * (raw_return - random_ref) / (expert_ref - random_ref)
