"""Offline transition datasets: binary serialization, sub-trajectory windows,
and the coarse (manager-timescale) view.

Wire format (little-endian): magic "OFRL", u32 version=1, u32 state_dim,
u32 action_dim, u64 transition count, u64 episode count, episode-length table
(u64 each), then an extension block (u32 augmented flag, u32 name length,
env name bytes, u64 generator seed) and transitions as packed f32 rows
[s | a | r | s_next | done].
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from offmbrl.errors import ContractError, FormatError, SamplingError

MAGIC = b"OFRL"
VERSION = 1


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool
    episode_id: int
    t: int


@dataclass
class SubTrajectory:
    """One horizon-T training window: states s_0..s_T, actions, rewards r_1..r_T."""

    states: np.ndarray     # (T+1, n)
    actions: np.ndarray    # (T, m)
    rewards: np.ndarray    # (T,)
    terminals: np.ndarray  # (T,) 1.0 where the transition ended the MDP

    @property
    def horizon(self) -> int:
        return len(self.actions)


@dataclass
class SubTrajectoryBatch:
    """Time-major batch of windows: states (T+1, B, n), the rest (T, B, ...)."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminals: np.ndarray

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]

    @property
    def batch_size(self) -> int:
        return self.actions.shape[1]


@dataclass
class OfflineDataset:
    """Episode-segmented transition store. Arrays are immutable by convention."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    episode_lengths: np.ndarray
    env_name: str = ""
    seed: int = 0
    augmented: bool = False
    coarseness: int = 1
    terminals: np.ndarray | None = None
    _window_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        n = len(self.states)
        for name in ("actions", "rewards", "next_states", "dones"):
            if len(getattr(self, name)) != n:
                raise FormatError(f"dataset field {name} length != transition count")
        self.episode_lengths = np.asarray(self.episode_lengths, dtype=np.int64)
        if self.episode_lengths.sum() != n:
            raise FormatError("episode lengths do not partition the transition array")
        if np.any(self.episode_lengths <= 0):
            raise FormatError("zero-length episode in episode table")
        if self.terminals is None:
            # terminal iff the episode ended on a unit (goal) reward; pure
            # truncation keeps bootstrapping alive
            self.terminals = (self.dones > 0.5) & (self.rewards >= 0.999)
        self.terminals = np.asarray(self.terminals, dtype=bool)

    # -- shape info -----------------------------------------------------------

    @property
    def size(self) -> int:
        return len(self.states)

    @property
    def num_episodes(self) -> int:
        return len(self.episode_lengths)

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    @property
    def episode_starts(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.episode_lengths)[:-1]])

    def transition(self, i: int) -> Transition:
        starts = self.episode_starts
        ep = int(np.searchsorted(starts, i, side="right") - 1)
        return Transition(
            s=self.states[i],
            a=self.actions[i],
            r=float(self.rewards[i]),
            s_next=self.next_states[i],
            done=bool(self.dones[i] > 0.5),
            episode_id=ep,
            t=int(i - starts[ep]),
        )

    # -- sub-trajectory sampling ------------------------------------------------

    def _valid_starts(self, horizon: int) -> np.ndarray:
        if horizon < 1:
            raise ContractError("horizon must be >= 1")
        cached = self._window_cache.get(horizon)
        if cached is not None:
            return cached
        chunks = []
        for start, length in zip(self.episode_starts, self.episode_lengths):
            if length >= horizon:
                chunks.append(start + np.arange(length - horizon + 1))
        starts = np.concatenate(chunks) if chunks else np.empty(0, dtype=np.int64)
        self._window_cache[horizon] = starts
        return starts

    def sample_subtrajectory(self, horizon: int, rng) -> SubTrajectory:
        batch = self.sample_subtrajectory_batch(horizon, 1, rng)
        return SubTrajectory(
            states=batch.states[:, 0],
            actions=batch.actions[:, 0],
            rewards=batch.rewards[:, 0],
            terminals=batch.terminals[:, 0],
        )

    def sample_subtrajectory_batch(self, horizon: int, batch_size: int, rng) -> SubTrajectoryBatch:
        """Uniform over all valid windows; windows never cross episode bounds."""
        starts = self._valid_starts(horizon)
        if len(starts) == 0:
            raise SamplingError(
                f"no episode is long enough for horizon {horizon} "
                f"(longest: {self.episode_lengths.max() if self.num_episodes else 0})"
            )
        base = starts[rng.integers(len(starts), size=batch_size)]
        idx = base[None, :] + np.arange(horizon)[:, None]
        states = np.concatenate(
            [self.states[idx], self.next_states[base + horizon - 1][None]], axis=0
        )
        return SubTrajectoryBatch(
            states=states,
            actions=self.actions[idx],
            rewards=self.rewards[idx],
            terminals=self.terminals[idx].astype(np.float32),
        )

    def sample_transitions(self, batch_size: int, rng) -> dict:
        """Plain (s, a, r, s', terminal) minibatch for worker algorithms."""
        idx = rng.integers(self.size, size=batch_size)
        return {
            "s": self.states[idx],
            "a": self.actions[idx],
            "r": self.rewards[idx].astype(np.float32),
            "s_next": self.next_states[idx],
            "terminal": self.terminals[idx].astype(np.float32),
        }


# -- coarsening ---------------------------------------------------------------


def coarsen(ds: OfflineDataset, k: int) -> OfflineDataset:
    """Manager-timescale view: stride-k state pairs with exact k-step reward sums.

    An episode's trailing remainder becomes one shortened final block (its
    true reward sum; nothing is padded or fabricated). Dropping it instead
    would silently discard the goal reward of every episode that terminates
    on success, starving the abstract critic. Coarse rewards are accumulated
    in float64. The coarse dataset has no actions (width 0); abstract actions
    come from the manager's inverse dynamics.
    """
    if k < 1:
        raise ContractError("coarseness k must be >= 1")
    states, next_states, rewards, dones, terminals, lengths = [], [], [], [], [], []
    rewards64 = ds.rewards.astype(np.float64)
    for start, length in zip(ds.episode_starts, ds.episode_lengths):
        length = int(length)
        block_starts = start + np.arange(0, length, k)
        block_ends = np.minimum(block_starts + k, start + length)  # exclusive
        nb = len(block_starts)
        states.append(ds.states[block_starts])
        next_states.append(ds.next_states[block_ends - 1])
        rewards.append(
            np.add.reduceat(rewards64[start : start + length], block_starts - start)
        )
        dones.append(ds.dones[block_ends - 1])
        terminals.append(ds.terminals[block_ends - 1])
        lengths.append(nb)
    if not states:
        raise SamplingError("cannot coarsen an empty dataset")
    nc = int(np.sum(lengths))
    return OfflineDataset(
        states=np.concatenate(states),
        actions=np.zeros((nc, 0), dtype=np.float32),
        rewards=np.concatenate(rewards),
        next_states=np.concatenate(next_states),
        dones=np.concatenate(dones),
        episode_lengths=np.array(lengths, dtype=np.int64),
        env_name=ds.env_name,
        seed=ds.seed,
        augmented=ds.augmented,
        coarseness=k * ds.coarseness,
        terminals=np.concatenate(terminals),
    )


# -- serialization --------------------------------------------------------------


def _header_bytes(ds: OfflineDataset) -> bytes:
    name = ds.env_name.encode("utf-8")
    parts = [
        MAGIC,
        struct.pack("<II", VERSION, ds.state_dim),
        struct.pack("<I", ds.action_dim),
        struct.pack("<QQ", ds.size, ds.num_episodes),
        ds.episode_lengths.astype("<u8").tobytes(),
        struct.pack("<II", 1 if ds.augmented else 0, len(name)),
        name,
        struct.pack("<Q", ds.seed % 2**64),
    ]
    return b"".join(parts)


def predicted_file_size(state_dim, action_dim, count, episode_count, name_len) -> int:
    row = 4 * (2 * state_dim + action_dim + 2)
    return 4 + 4 + 4 + 4 + 8 + 8 + 8 * episode_count + 4 + 4 + name_len + 8 + row * count


def save_dataset(ds: OfflineDataset, path):
    """Atomic write of the binary format. Coarse views are memory-only."""
    if ds.coarseness != 1:
        raise ContractError("coarsened datasets are derived views; save the raw dataset")
    rows = np.empty((ds.size, 2 * ds.state_dim + ds.action_dim + 2), dtype="<f4")
    n, m = ds.state_dim, ds.action_dim
    rows[:, :n] = ds.states
    rows[:, n : n + m] = ds.actions
    rows[:, n + m] = ds.rewards
    rows[:, n + m + 1 : 2 * n + m + 1] = ds.next_states
    rows[:, 2 * n + m + 1] = ds.dones
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ofrl-tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(_header_bytes(ds))
            f.write(rows.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_dataset(path) -> OfflineDataset:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 32 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: not an OFRL dataset (bad magic)")
    version, state_dim, action_dim = struct.unpack("<III", raw[4:16])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported OFRL version {version}")
    count, episodes = struct.unpack("<QQ", raw[16:32])
    off = 32
    table_bytes = 8 * episodes
    if len(raw) < off + table_bytes + 16:
        raise FormatError(f"{path}: truncated episode table")
    episode_lengths = np.frombuffer(raw, dtype="<u8", count=episodes, offset=off).astype(np.int64)
    off += table_bytes
    augmented, name_len = struct.unpack("<II", raw[off : off + 8])
    off += 8
    name = raw[off : off + name_len].decode("utf-8")
    off += name_len
    (seed,) = struct.unpack("<Q", raw[off : off + 8])
    off += 8
    expected = predicted_file_size(state_dim, action_dim, count, episodes, name_len)
    if len(raw) != expected:
        raise FormatError(f"{path}: file size {len(raw)} != header-predicted {expected}")
    width = 2 * state_dim + action_dim + 2
    rows = np.frombuffer(raw, dtype="<f4", count=count * width, offset=off).reshape(count, width)
    n, m = state_dim, action_dim
    return OfflineDataset(
        states=rows[:, :n].copy(),
        actions=rows[:, n : n + m].copy(),
        rewards=rows[:, n + m].copy(),
        next_states=rows[:, n + m + 1 : 2 * n + m + 1].copy(),
        dones=rows[:, 2 * n + m + 1].copy(),
        episode_lengths=episode_lengths,
        env_name=name,
        seed=int(seed),
        augmented=bool(augmented),
    )


def export_jsonl(ds: OfflineDataset, path):
    """Debug view: one JSON object per transition."""
    with open(path, "w", encoding="utf-8") as f:
        i = 0
        for ep, length in enumerate(ds.episode_lengths):
            for t in range(int(length)):
                rec = {
                    "episode": ep,
                    "t": t,
                    "s": [float(x) for x in ds.states[i]],
                    "a": [float(x) for x in ds.actions[i]],
                    "r": float(ds.rewards[i]),
                    "s_next": [float(x) for x in ds.next_states[i]],
                    "done": int(ds.dones[i] > 0.5),
                }
                f.write(json.dumps(rec) + "\n")
                i += 1
