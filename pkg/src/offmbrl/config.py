"""Experiment configuration: every hyper-parameter is settable by name and
defaults to its published value; desk-scale presets override only sizes and
budgets. Files are TOML; unknown keys are rejected."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from offmbrl.errors import ConfigError
from offmbrl.iql import IqlConfig
from offmbrl.manager import ManagerConfig
from offmbrl.planner import PlannerConfig
from offmbrl.tdmpc import LossWeights


@dataclass(frozen=True)
class EnvSection:
    name: str = "maze-medium"
    start_mode: str = "fixed"
    reward_mode: str = "sparse"
    max_steps: int = 150


@dataclass(frozen=True)
class DatasetSection:
    mixture: str = "play"
    transitions: int = 200_000
    seed: int = 0
    path: str = ""              # set after gen-data, or to an existing file


@dataclass(frozen=True)
class AgentSection:
    """Flat-agent hyper-parameters; defaults are the offline-agent values."""

    gamma: float = 0.99
    latent_dim: int = 50
    plan_horizon: int = 2
    population: int = 512            # n_pi + n_random
    num_pi_samples: int = 512
    num_random_samples: int = 0
    num_elites: int = 64
    iterations: int = 6
    momentum: float = 0.1
    temperature: float = 0.5
    prioritized_replay: bool = False
    lr: float = 3e-4
    batch_size: int = 256
    mlp_hidden: int = 512
    enc_hidden: int = 256
    bootstrap_plan_mean: bool = True   # value at the last planning state
    bootstrap_td_mean: bool = True     # value in the TD target
    reward_coef: float = 0.5           # c_R
    critic_coef: float = 0.1           # c_Q
    consistency_coef: float = 2.0      # c_f
    rho: float = 0.5
    grad_clip: float = 10.0
    target_update_freq: int = 2
    target_momentum: float = 0.01
    # offline-extension knobs
    tau: float = 0.9
    beta: float = 3.0
    adv_clip: float = 100.0
    value_loss_coef: float = 0.1
    critic_loss: str = "tdmpc"
    log_std_min: float = -5.0
    log_std_max: float = 2.0
    action_clip: float = 0.99
    entropy_bonus: float = 0.1

    def validate(self):
        if self.population != self.num_pi_samples + self.num_random_samples:
            raise ConfigError(
                "population must equal num_pi_samples + num_random_samples "
                f"({self.population} != {self.num_pi_samples}+{self.num_random_samples})"
            )
        self.iql().validate()
        self.planner().validate()
        return self

    def weights(self) -> LossWeights:
        return LossWeights(
            consistency=self.consistency_coef,
            reward=self.reward_coef,
            critic=self.critic_coef,
            rho=self.rho,
            gamma=self.gamma,
        )

    def iql(self) -> IqlConfig:
        return IqlConfig(
            tau=self.tau,
            beta=self.beta,
            adv_clip=self.adv_clip,
            value_loss_coef=self.value_loss_coef,
            critic_loss=self.critic_loss,
            action_clip=self.action_clip,
            entropy_bonus=self.entropy_bonus,
        )

    def planner(self) -> PlannerConfig:
        return PlannerConfig(
            horizon=self.plan_horizon,
            num_pi_samples=self.num_pi_samples,
            num_random_samples=self.num_random_samples,
            num_elites=self.num_elites,
            iterations=self.iterations,
            momentum=self.momentum,
            temperature=self.temperature,
            gamma=self.gamma,
            bootstrap_mean=self.bootstrap_plan_mean,
        )


TDMPC_BASELINE_OVERRIDES = dict(
    plan_horizon=5,
    num_pi_samples=25,
    num_random_samples=487,
    lr=1e-3,
    batch_size=512,
    bootstrap_plan_mean=False,
    bootstrap_td_mean=False,
    prioritized_replay=False,
)


@dataclass(frozen=True)
class ManagerSection:
    """Manager hyper-parameters (abstract-timescale agent)."""

    latent_dim: int = 10
    plan_horizon: int = 4
    coarseness: int = 8
    blocks: int = 8
    classes: int = 10
    reward_scale: float = 1.0
    replan_interval: int = 1
    tau: float = 0.9
    adv_clip: float = 100.0
    value_loss_coef: float = 0.1
    critic_loss: str = "iql"
    lr: float = 3e-4
    batch_size: int = 256
    mlp_hidden: int = 512
    enc_hidden: int = 256
    num_pi_samples: int = 512
    num_elites: int = 64
    temperature: float = 0.5
    gamma: float = 0.99
    train_decoder: bool = True

    @property
    def beta(self) -> float:
        return 3.0 / self.reward_scale

    def manager_config(self) -> ManagerConfig:
        return ManagerConfig(
            latent_dim=self.latent_dim,
            plan_horizon=self.plan_horizon,
            coarseness=self.coarseness,
            blocks=self.blocks,
            classes=self.classes,
            reward_scale=self.reward_scale,
            replan_interval=self.replan_interval,
            train_decoder=self.train_decoder,
        ).validate()

    def iql(self) -> IqlConfig:
        return IqlConfig(
            tau=self.tau,
            beta=self.beta,
            adv_clip=self.adv_clip,
            value_loss_coef=self.value_loss_coef,
            critic_loss=self.critic_loss,
        )

    def planner(self) -> PlannerConfig:
        return PlannerConfig(
            horizon=self.plan_horizon,
            num_pi_samples=self.num_pi_samples,
            num_random_samples=0,
            num_elites=self.num_elites,
            temperature=self.temperature,
            gamma=self.gamma,
            bootstrap_mean=True,
        )


@dataclass(frozen=True)
class WorkerSection:
    algorithm: str = "bc"
    hidden: int = 256
    lr: float = 3e-4
    batch_size: int = 256
    gamma: float = 0.99
    augmentation: str = "none"
    tau: float = 0.9
    beta: float = 3.0
    bc_alpha: float = 2.5

    def spec(self):
        from offmbrl.workers import WorkerSpec

        return WorkerSpec(
            algorithm=self.algorithm,
            hidden=self.hidden,
            lr=self.lr,
            batch_size=self.batch_size,
            gamma=self.gamma,
            augmentation=self.augmentation,
            tau=self.tau,
            beta=self.beta,
            bc_alpha=self.bc_alpha,
        ).validate()


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    flat_steps: int = 15_000
    manager_steps: int = 30_000
    worker_steps: int = 20_000
    eval_episodes: int = 100
    log_every: int = 100
    out_dir: str = "runs"


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvSection = field(default_factory=EnvSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    agent: AgentSection = field(default_factory=AgentSection)
    manager: ManagerSection = field(default_factory=ManagerSection)
    worker: WorkerSection = field(default_factory=WorkerSection)
    run: RunSection = field(default_factory=RunSection)

    def validate(self):
        self.agent.validate()
        self.manager.manager_config()
        self.worker.spec()
        self.env_config()
        return self

    def env_config(self):
        from offmbrl.envs import env_config

        return env_config(
            self.env.name,
            start_mode=self.env.start_mode,
            reward_mode=self.env.reward_mode,
            max_steps=self.env.max_steps,
        )

    def data_env_config(self):
        """Behavior data is collected from uniformly sampled starts."""
        from offmbrl.envs import env_config

        return env_config(
            self.env.name,
            start_mode="uniform",
            reward_mode=self.env.reward_mode,
            max_steps=self.env.max_steps,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


_SECTIONS = {
    "env": EnvSection,
    "dataset": DatasetSection,
    "agent": AgentSection,
    "manager": ManagerSection,
    "worker": WorkerSection,
    "run": RunSection,
}


def _build_section(cls, data: dict, where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data: dict) -> ExperimentConfig:
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    kwargs = {
        name: _build_section(cls, data.get(name, {}), name)
        for name, cls in _SECTIONS.items()
    }
    return ExperimentConfig(**kwargs).validate()


def load_config(path) -> ExperimentConfig:
    with open(path, "rb") as f:
        try:
            data = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
    return config_from_dict(data)


def desk_overrides(env_name: str) -> dict:
    """Down-scaled sizes and budgets for laptop-speed runs on the desk tasks."""
    base = {
        "agent": dict(
            latent_dim=16, mlp_hidden=64, enc_hidden=64,
            num_pi_samples=64, num_random_samples=0, population=64, num_elites=8,
        ),
        "manager": dict(
            mlp_hidden=64, enc_hidden=64, batch_size=128,
            num_pi_samples=64, num_elites=8, replan_interval=8,
            gamma=0.8,
        ),
        "worker": dict(hidden=64),
        "env": dict(name=env_name),
    }
    if env_name == "runner":
        base["env"]["reward_mode"] = "dense"
        base["env"]["max_steps"] = 100
        base["manager"]["reward_scale"] = 0.1
    return base


def desk_config(env_name: str, **section_overrides) -> ExperimentConfig:
    data = desk_overrides(env_name)
    for section, values in section_overrides.items():
        data.setdefault(section, {}).update(values)
    return config_from_dict(data)
