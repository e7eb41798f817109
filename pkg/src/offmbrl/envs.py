"""Desk-scale continuous-control tasks: point-mass mazes and a 1-D runner.

Maze coordinates are cell units: cell (row, col) spans [col, col+1) x
[row, row+1), walls are '#' cells. The point mass integrates semi-implicit
Euler with velocity damping; observations are normalized to O(1).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from offmbrl.errors import ConfigError, ContractError

ACCEL = 0.1          # cells / step^2 per unit action
DAMPING = 0.95       # velocity retained per step
SUBSTEPS = 4         # collision sub-stepping; max speed ~1.9 cells/step
WALL_MARGIN = 1e-3
VEL_NORM = 4.0
GOAL_RADIUS = 0.5

UMAZE = (
    "#####",
    "#OOG#",
    "#O###",
    "#OOS#",
    "#####",
)

MEDIUM_MAZE = (
    "########",
    "#O####G#",
    "#O#OO#O#",
    "#OOO##O#",
    "###O#OO#",
    "#OOO#O##",
    "#S#OOOO#",
    "########",
)

LARGE_MAZE = (
    "############",
    "#OOO#OOO#OG#",
    "#O#O#O#O#O##",
    "#O#OOO#O#O##",
    "#O###O#O#O##",
    "#OOO#O#OOO##",
    "#O#####O#O##",
    "#SOO#OOO#OO#",
    "############",
)


@dataclass(frozen=True)
class EnvConfig:
    """Full description of a task: layout, dynamics scales, episode rules."""

    name: str
    kind: str = "maze"                # "maze" | "runner"
    layout: tuple[str, ...] = UMAZE
    start_mode: str = "fixed"         # "fixed" | "uniform"
    reward_mode: str = "sparse"       # "sparse" | "dense"
    max_steps: int = 150
    goal_radius: float = GOAL_RADIUS
    accel: float = ACCEL
    damping: float = DAMPING
    # runner-specific
    track_length: float = 200.0
    target_speed_range: tuple[float, float] = (0.4, 1.6)

    def validate(self):
        if self.kind not in ("maze", "runner"):
            raise ConfigError(f"unknown env kind {self.kind!r}")
        if self.start_mode not in ("fixed", "uniform"):
            raise ConfigError(f"unknown start mode {self.start_mode!r}")
        if self.reward_mode not in ("sparse", "dense"):
            raise ConfigError(f"unknown reward mode {self.reward_mode!r}")
        return self


_ENV_PRESETS = {
    "maze-umaze": EnvConfig(name="maze-umaze", layout=UMAZE, max_steps=100),
    "maze-medium": EnvConfig(name="maze-medium", layout=MEDIUM_MAZE, max_steps=150),
    "maze-large": EnvConfig(name="maze-large", layout=LARGE_MAZE, max_steps=250),
    "runner": EnvConfig(
        name="runner", kind="runner", reward_mode="dense", max_steps=100, layout=()
    ),
}


def env_config(name: str, **overrides) -> EnvConfig:
    if name not in _ENV_PRESETS:
        raise ConfigError(f"unknown environment {name!r}; choose from {sorted(_ENV_PRESETS)}")
    cfg = _ENV_PRESETS[name]
    return replace(cfg, **overrides).validate() if overrides else cfg


def make_env(cfg_or_name, **overrides):
    cfg = env_config(cfg_or_name, **overrides) if isinstance(cfg_or_name, str) else cfg_or_name
    cfg.validate()
    return RunnerEnv(cfg) if cfg.kind == "runner" else MazeEnv(cfg)


def _as_rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


class MazeEnv:
    """Damped point mass in a wall grid; sparse goal reward ends the episode."""

    def __init__(self, cfg: EnvConfig):
        cfg.validate()
        self.cfg = cfg
        rows = cfg.layout
        if not rows or any(len(r) != len(rows[0]) for r in rows):
            raise ConfigError(f"{cfg.name}: ragged or empty maze layout")
        self.height = len(rows)
        self.width = len(rows[0])
        self.walls = np.array([[c == "#" for c in row] for row in rows], dtype=bool)
        self.start_cell = self._find(rows, "S")
        self.goal_cell = self._find(rows, "G")
        self.goal = np.array([self.goal_cell[1] + 0.5, self.goal_cell[0] + 0.5])
        free = [
            (r, c)
            for r in range(self.height)
            for c in range(self.width)
            if not self.walls[r, c]
        ]
        self.free_cells = np.array(free, dtype=np.int64)
        # uniform resets never spawn inside the goal cell
        self.start_cells = self.free_cells[
            ~np.all(self.free_cells == np.array(self.goal_cell), axis=1)
        ]
        self._pos = np.zeros(2)
        self._vel = np.zeros(2)
        self._t = 0

    @staticmethod
    def _find(rows, marker):
        hits = [(r, c) for r, row in enumerate(rows) for c, ch in enumerate(row) if ch == marker]
        if len(hits) != 1:
            raise ConfigError(f"layout must contain exactly one {marker!r} cell, found {len(hits)}")
        return hits[0]

    # -- dimensions -----------------------------------------------------------

    @property
    def state_dim(self) -> int:
        return 4

    @property
    def action_dim(self) -> int:
        return 2

    # -- core dynamics ---------------------------------------------------------

    def _wall_at(self, x: float, y: float) -> bool:
        cx, cy = int(np.floor(x)), int(np.floor(y))
        if cx < 0 or cy < 0 or cx >= self.width or cy >= self.height:
            return True
        return bool(self.walls[cy, cx])

    def obs(self) -> np.ndarray:
        return np.array(
            [
                self._pos[0] / self.width,
                self._pos[1] / self.height,
                self._vel[0] / VEL_NORM,
                self._vel[1] / VEL_NORM,
            ],
            dtype=np.float32,
        )

    def unnormalize(self, obs) -> tuple[np.ndarray, np.ndarray]:
        """Map a (batch of) normalized observation(s) back to raw pos/vel."""
        obs = np.asarray(obs, dtype=np.float64)
        pos = obs[..., :2] * np.array([self.width, self.height])
        vel = obs[..., 2:4] * VEL_NORM
        return pos, vel

    def reset(self, seed_or_rng=None) -> np.ndarray:
        rng = _as_rng(seed_or_rng)
        if self.cfg.start_mode == "fixed":
            r, c = self.start_cell
            self._pos = np.array([c + 0.5, r + 0.5])
        else:
            r, c = self.start_cells[rng.integers(len(self.start_cells))]
            self._pos = np.array([c, r]) + 0.15 + 0.7 * rng.random(2)[::-1]
        self._vel = np.zeros(2)
        self._t = 0
        return self.obs()

    def set_state(self, pos, vel=(0.0, 0.0), t=0):
        """Raw-coordinate override for controllers and tests."""
        self._pos = np.asarray(pos, dtype=np.float64).copy()
        self._vel = np.asarray(vel, dtype=np.float64).copy()
        self._t = t

    @property
    def raw_pos(self) -> np.ndarray:
        return self._pos.copy()

    @property
    def raw_vel(self) -> np.ndarray:
        return self._vel.copy()

    def step(self, action):
        action = np.asarray(action, dtype=np.float64).reshape(2)
        if not np.all(np.isfinite(action)):
            raise ContractError("maze action must be finite")
        action = np.clip(action, -1.0, 1.0)
        prev_dist = float(np.linalg.norm(self._pos - self.goal))
        self._vel = self.cfg.damping * (self._vel + self.cfg.accel * action)
        for _ in range(SUBSTEPS):
            for axis in (0, 1):
                cand = self._pos.copy()
                cand[axis] += self._vel[axis] / SUBSTEPS
                if self._wall_at(cand[0], cand[1]):
                    if self._vel[axis] > 0:
                        cand[axis] = np.floor(cand[axis]) - WALL_MARGIN
                    else:
                        cand[axis] = np.floor(cand[axis]) + 1 + WALL_MARGIN
                    self._vel[axis] = 0.0
                self._pos[axis] = cand[axis]
        self._t += 1
        dist = float(np.linalg.norm(self._pos - self.goal))
        reached = dist <= self.cfg.goal_radius
        if self.cfg.reward_mode == "sparse":
            reward = 1.0 if reached else 0.0
            terminal = reached
        else:
            reward = prev_dist - dist
            terminal = reached
        truncated = (not terminal) and self._t >= self.cfg.max_steps
        done = terminal or truncated
        return self.obs(), np.float32(reward), done, {"terminal": terminal, "truncated": truncated}


class RunnerEnv:
    """Dense velocity-tracking task: reward peaks when speed matches the target."""

    def __init__(self, cfg: EnvConfig):
        cfg.validate()
        self.cfg = cfg
        self._p = 0.0
        self._v = 0.0
        self._target = 1.0
        self._t = 0

    @property
    def state_dim(self) -> int:
        return 3

    @property
    def action_dim(self) -> int:
        return 1

    def obs(self) -> np.ndarray:
        return np.array(
            [self._p / self.cfg.track_length, self._v / 2.0, self._target / 2.0],
            dtype=np.float32,
        )

    def reset(self, seed_or_rng=None) -> np.ndarray:
        rng = _as_rng(seed_or_rng)
        self._p = 0.0
        self._v = 0.0
        if self.cfg.start_mode == "fixed":
            self._target = 1.0
        else:
            lo, hi = self.cfg.target_speed_range
            self._target = float(lo + (hi - lo) * rng.random())
        self._t = 0
        return self.obs()

    def set_state(self, p, v, target, t=0):
        self._p, self._v, self._target, self._t = float(p), float(v), float(target), t

    @property
    def raw_vel(self) -> float:
        return self._v

    @property
    def target_speed(self) -> float:
        return self._target

    def step(self, action):
        action = np.asarray(action, dtype=np.float64).reshape(1)
        if not np.all(np.isfinite(action)):
            raise ContractError("runner action must be finite")
        a = float(np.clip(action[0], -1.0, 1.0))
        self._v = self.cfg.damping * (self._v + self.cfg.accel * a)
        self._p = float(np.clip(self._p + self._v, 0.0, self.cfg.track_length))
        self._t += 1
        reward = max(0.0, 1.0 - abs(self._v - self._target))
        truncated = self._t >= self.cfg.max_steps
        return self.obs(), np.float32(reward), truncated, {"terminal": False, "truncated": truncated}


# -- shortest-path helpers (used by controllers and probes) -------------------


def bfs_distance_field(walls: np.ndarray, target_cell) -> np.ndarray:
    """Cell-steps distance to ``target_cell`` over free cells; inf if unreachable."""
    h, w = walls.shape
    dist = np.full((h, w), np.inf)
    tr, tc = target_cell
    if walls[tr, tc]:
        return dist
    dist[tr, tc] = 0
    frontier = [(tr, tc)]
    d = 0
    while frontier:
        d += 1
        nxt = []
        for r, c in frontier:
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w and not walls[rr, cc] and dist[rr, cc] > d:
                    dist[rr, cc] = d
                    nxt.append((rr, cc))
        frontier = nxt
    return dist
