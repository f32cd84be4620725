"""Experiment configuration with JSON round-tripping and full defaulting."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .datalog import DatasetConfig
from .orchestrator import RetryPolicy
from .policy import TrainConfig
from .sim2d import EVAL_SEED_BASE, TASKS


@dataclass
class DemoPlan:
    """How scripted demonstrations are collected for one condition."""

    demos_per_env: int = 25
    expertise: str = "expert"  # expert | nonexpert | mixed
    noise_level: float = 0.02  # non-expert action noise
    fail_rate: float = 0.15  # non-expert early-abort probability
    start_jitter: float = 0.02
    tremor: float = 0.004  # hand-shake noise on expert demos
    recovery_fraction: float = 0.2  # share of demos starting from scrambled states

    def __post_init__(self):
        if self.expertise not in ("expert", "nonexpert", "mixed"):
            raise ValueError(f"unknown expertise {self.expertise!r}")


@dataclass
class RvqConfig:
    codes: int = 16
    layers: int = 2
    iters: int = 100
    seed: int = 0


@dataclass
class ExperimentConfig:
    task: str = "pickup"
    train_envs: int = 40
    train_seed: int = 0
    eval_envs: int = 5
    eval_seed: int = EVAL_SEED_BASE
    grid_runs: int = 10
    episodes_per_grid: int = 1
    max_steps: int = 150
    variant: str = "vqbet"  # vqbet | bc
    infer_mode: str = "sample"  # sample | argmax
    temperature: float = 0.5
    critic: str = "oracle"  # oracle | noisy | llm
    critic_fp_rate: float = 0.0
    critic_fn_rate: float = 0.0
    workers: int = 1
    demo: DemoPlan = field(default_factory=DemoPlan)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    rvq: RvqConfig = field(default_factory=RvqConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    retry: RetryPolicy = field(default_factory=RetryPolicy)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.train_seed >= EVAL_SEED_BASE:
            raise ValueError(f"training env seeds live below {EVAL_SEED_BASE}")
        if self.eval_seed < EVAL_SEED_BASE:
            raise ValueError(f"evaluation env seeds start at {EVAL_SEED_BASE}")

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(asdict(self), indent=indent, sort_keys=True)

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        d = dict(d)
        nested = {"demo": DemoPlan, "dataset": DatasetConfig, "rvq": RvqConfig,
                  "train": TrainConfig, "retry": RetryPolicy}
        kwargs = {}
        for f in fields(ExperimentConfig):
            if f.name not in d:
                continue
            value = d.pop(f.name)
            if f.name in nested and isinstance(value, dict):
                value = nested[f.name](**value)
            kwargs[f.name] = value
        if d:
            raise ValueError(f"unknown config keys: {sorted(d)}")
        return ExperimentConfig(**kwargs)

    @staticmethod
    def from_json(text: str) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(json.loads(text))

    @staticmethod
    def load(path) -> "ExperimentConfig":
        with open(path) as f:
            return ExperimentConfig.from_json(f.read())
