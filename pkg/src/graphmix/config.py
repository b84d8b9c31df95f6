"""Run configuration: one TOML file fully determines a run given a seed.

Sections map to dataclasses below; every field has a documented default
(training defaults follow the benchmark-lineage values: learning rate 5e-4,
batch 32, buffer 5000 episodes, target sync every 200 episodes, evaluation
every 2e4 steps over 32 episodes, epsilon 1.0 -> 0.05 over 5e4 steps).
Unknown keys are rejected with the offending section and key.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .envs import DEFAULT_TWOSTEP_PAYOFFS, CoopGrid, CoopGridConfig, TwoStepGame


class ConfigError(ValueError):
    pass


@dataclass
class EnvConfig:
    name: str = "coopgrid"
    gamma: float = 0.99
    # tabular two-phase game
    payoffs: list = field(default_factory=lambda: [list(map(list, t))
                                                   for t in DEFAULT_TWOSTEP_PAYOFFS])
    # grid capture game
    width: int = 5
    height: int = 5
    n_agents: int = 3
    n_targets: int = 1
    capture_quorum: int = 2
    p_death: float = 0.1
    target_move_prob: float = 0.3
    visibility: int = 4
    episode_limit: int = 30
    capture_reward: float = 10.0
    obs_ally_slots: int = 5
    obs_target_slots: int = 2
    state_ally_slots: int = 6
    state_target_slots: int = 2


@dataclass
class ModelConfig:
    hidden_dim: int = 64     # recurrent state size per agent
    attn_dim: int = 16       # attention embedding size
    gnn_layers: int = 1
    embed_dim: int = 32      # node embedding width
    gin_hidden: int = 16
    hyper_hidden: int = 64
    variant: str = "gin"     # gin | gcn | vdn
    attention: bool = True
    max_agents: int = 0      # id one-hot size; 0 means the env's team size


@dataclass
class TrainConfig:
    lr: float = 5e-4
    total_steps: int = 200_000
    batch_size: int = 32
    buffer_size: int = 5000
    target_period: int = 200       # episodes between target syncs
    eval_period: int = 20_000      # env steps between evaluations
    eval_episodes: int = 32
    lambda_local: float = 0.0
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 50_000
    grad_clip: float = 10.0
    rms_alpha: float = 0.99
    rms_eps: float = 1e-5
    stop_at_success: float = -1.0  # stop once eval success rate reaches this; off if < 0


@dataclass
class IOConfig:
    out_dir: str = "runs/run"
    checkpoint_period: int = 0     # env steps; 0 means every evaluation


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    io: IOConfig = field(default_factory=IOConfig)

    def validate(self) -> "RunConfig":
        if self.env.name not in ("twostep", "coopgrid"):
            raise ConfigError(f"env.name must be 'twostep' or 'coopgrid', got {self.env.name!r}")
        if not 0.0 <= self.env.gamma < 1.0:
            raise ConfigError(f"env.gamma must be in [0,1), got {self.env.gamma}")
        if self.train.lambda_local < 0:
            raise ConfigError(f"train.lambda_local must be >= 0, got {self.train.lambda_local}")
        for key in ("target_period", "eval_period", "eval_episodes", "batch_size",
                    "buffer_size"):
            if getattr(self.train, key) <= 0:
                raise ConfigError(f"train.{key} must be positive")
        if self.train.total_steps < 0:
            raise ConfigError("train.total_steps must be >= 0")
        if self.model.variant not in ("gin", "gcn", "vdn"):
            raise ConfigError(f"model.variant must be gin/gcn/vdn, got {self.model.variant!r}")
        return self


_SECTIONS = {"env": EnvConfig, "model": ModelConfig, "train": TrainConfig, "io": IOConfig}


def _fill(section: str, cls, data: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key '{key}' in section [{section}]")
    return cls(**data)


def from_dict(data: dict) -> RunConfig:
    for section in data:
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
    kwargs = {name: _fill(name, cls, dict(data.get(name, {})))
              for name, cls in _SECTIONS.items()}
    return RunConfig(**kwargs).validate()


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = tomli.loads(path.read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error in {path}: {exc}") from exc
    return from_dict(data)


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def make_env_from_config(env_cfg: EnvConfig):
    if env_cfg.name == "twostep":
        return TwoStepGame(env_cfg.payoffs, gamma=env_cfg.gamma)
    grid_fields = {f.name for f in dataclasses.fields(CoopGridConfig)}
    kwargs = {k: v for k, v in dataclasses.asdict(env_cfg).items() if k in grid_fields}
    return CoopGrid(CoopGridConfig(**kwargs))
