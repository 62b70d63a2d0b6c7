"""Configuration module for experiments.

A single YAML file (JSON works too) holds a `default` section plus one
section per preset. `Config` loads it once and answers lookups for the active
preset with a fallback to the defaults; `ExperimentConfig` is the validated
view a run actually uses.
"""

import logging
import math
import os
from itertools import product
from typing import Annotated, Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
import yaml

from src.pwa.core import AffineClassifier, AffineMap, unit_vectors
from src.pwa.dynamics import FeedbackPolicy, OpenLoopPolicy, PwaDynamics
from src.pwa.erm import ClassifierSolver, ErmSettings
from src.pwa.errors import ConfigError
from src.pwa.generators import PwaRegressionModel, ZPolicy, ZPolicyName
from src.pwa.learner import HingeConfig, ThresholdLearnerName
from src.pwa.smoothing import ChannelKind, Convention, NoiseChannel

logger = logging.getLogger(__name__)

Mode = Literal[
    "regress",
    "dynamics",
    "simulate",
    "adversary",
    "hard-id",
    "verify-smoothness",
    "erm-check",
]
SmoothChannel = Literal["gaussian", "uniform_ball"]


class Config:
    """Configuration system with preset-based settings.

    Lookups check the active preset first, then the `default` section.

    Example:
        Config.set_preset("two-mode-1d")
        T = Config.get("T")
    """

    _instance = None
    _config: dict[str, Any] = {}
    _active_preset: str = "default"

    def __new__(cls) -> "Config":
        if cls._instance is None:
            cls._instance = super().__new__(cls)
            cls._load_config()
        return cls._instance

    @classmethod
    def _load_config(cls, path: str | None = None) -> None:
        """Load the configuration from YAML."""
        config_path = path or os.environ.get("PWA_CONFIG_PATH", "config.yaml")
        try:
            with open(config_path) as file:
                cls._config = yaml.safe_load(file) or {}
        except Exception as e:
            logger.warning(f"Could not load config file {config_path}: {e}")
            cls._config = {}

    @classmethod
    def load(cls, path: str) -> None:
        """Replace the loaded configuration with another file."""
        cls._instance = None
        cls._active_preset = "default"
        Config()
        cls._load_config(path)

    @classmethod
    def set_preset(cls, preset: str) -> None:
        """Set the active preset.

        Raises:
            ConfigError: If the preset is not a section of the configuration
        """
        if preset not in cls._config and preset != "default":
            raise ConfigError(f"Unknown preset: {preset}")
        cls._active_preset = preset

    @classmethod
    def get_active_preset(cls) -> str:
        return cls._active_preset

    @classmethod
    def get(cls, key: str, default: Any | None = None) -> Any:
        """Get a value from the active preset, falling back to `default`."""
        section = cls._config.get(cls._active_preset) or {}
        if key in section:
            return section[key]
        defaults = cls._config.get("default") or {}
        if key in defaults:
            return defaults[key]
        return default

    @classmethod
    def get_available_presets(cls) -> list[str]:
        return [name for name in cls._config.keys() if name != "default"]

    @classmethod
    def section(cls, preset: str | None = None) -> dict[str, Any]:
        """The merged `default` and preset sections."""
        merged = dict(cls._config.get("default") or {})
        merged.update(cls._config.get(preset or cls._active_preset) or {})
        return merged


def parse_seeds(value: Any) -> list[int]:
    """Seeds from an int, a list, ``"0..9"`` (inclusive) or ``"1,4,7"``."""
    if isinstance(value, int):
        return [value]
    if isinstance(value, list):
        return [int(v) for v in value]
    text = str(value).strip()
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            low, high = part.split("..", 1)
            start, stop = int(low), int(high)
            if stop < start:
                raise ValueError(f"empty seed range {part}")
            seeds.extend(range(start, stop + 1))
        elif part:
            seeds.append(int(part))
    if not seeds:
        raise ValueError("no seeds given")
    return seeds


def parse_overrides(items: list[str]) -> dict[str, Any]:
    """Turn ``key=value`` strings into a nested dict; values are YAML scalars.

    Dotted keys such as ``instance.noise_scale`` address nested sections.
    """
    overrides: dict[str, Any] = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse value of {key}: {e}") from e
        _nest(overrides, key.strip(), value)
    return overrides


def _nest(target: dict[str, Any], key: str, value: Any) -> None:
    *parents, leaf = key.split(".")
    for parent in parents:
        target = target.setdefault(parent, {})
    target[leaf] = value


def merge_sections(base: dict[str, Any], extra: dict[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_sections(merged[key], value)
        else:
            merged[key] = value
    return merged


def smooth_channel(
    kind: SmoothChannel, sigma_dir: float, dimension: int
) -> NoiseChannel:
    """A channel whose claimed smoothness is exactly `sigma_dir`."""
    if kind == "gaussian":
        return NoiseChannel.gaussian_for(sigma_dir, dimension)
    return NoiseChannel(kind="uniform_ball", dimension=dimension, sigma=2.0 * sigma_dir)


class RegressionInstanceSpec(BaseModel):
    """Declarative description of a smoothed regression instance.

    Missing maps are sampled as smoothed parameters inside the ball
    `frobenius_bound`; a missing classifier gets random unit directions.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["regression"] = "regression"
    d: int = Field(..., ge=1)
    m: int = Field(default=1, ge=1)
    K: int = Field(..., ge=1)
    maps: list[list[list[float]]] | None = None
    directions: list[list[float]] | None = None
    offsets: list[float] | None = None
    channel: SmoothChannel = "gaussian"
    sigma_dir: float = Field(default=0.2, gt=0.0)
    noise_scale: float = Field(default=0.1, ge=0.0)
    corruption: float = Field(default=0.0, ge=0.0)
    covariate_bound: float = Field(default=math.inf, gt=1.0)
    frobenius_bound: float = Field(default=math.inf, gt=0.0)
    separation: float = Field(default=0.0, ge=0.0)
    truncate_noise: bool = False
    z_policy: ZPolicyName = "random"
    z_scale: float = Field(default=1.0, ge=0.0)
    z_step: float = Field(default=0.1, ge=0.0)

    def policy(self) -> ZPolicy:
        return ZPolicy(name=self.z_policy, scale=self.z_scale, step=self.z_step)

    def build(self, rng: np.random.Generator) -> PwaRegressionModel:
        bound = self.frobenius_bound
        if self.maps is not None:
            maps = [AffineMap(matrix=m, frobenius_bound=bound) for m in self.maps]
        else:
            radius = bound if math.isfinite(bound) else 2.0
            draws = unit_vectors(rng, self.K, self.m * (self.d + 1))
            maps = [
                AffineMap.projected(v.reshape(self.m, self.d + 1) * radius / 2.0, bound)
                for v in draws
            ]
        if self.directions is not None:
            offsets = self.offsets or [0.0] * self.K
            classifier = AffineClassifier(directions=self.directions, offsets=offsets)
        else:
            classifier = AffineClassifier(
                directions=unit_vectors(rng, self.K, self.d),
                offsets=rng.uniform(-0.5, 0.5, size=self.K),
            )
        return PwaRegressionModel(
            maps=maps,
            classifier=classifier,
            noise_scale=self.noise_scale,
            channel=smooth_channel(self.channel, self.sigma_dir, self.d),
            corruption=self.corruption,
            covariate_bound=self.covariate_bound,
            separation=self.separation,
            truncate_noise=self.truncate_noise,
        )


class DynamicsInstanceSpec(BaseModel):
    """Declarative description of a piecewise-affine system and its inputs."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["dynamics"] = "dynamics"
    A: list[list[list[float]]]
    B: list[list[list[float]]]
    offsets: list[list[float]]
    directions: list[list[float]]
    classifier_offsets: list[float]
    noise_sigma_dir: float = Field(default=0.3, gt=0.0)
    noise_bound: float = Field(default=math.inf, gt=0.0)
    lyapunov: list[list[float]] | None = None
    input_sigma_dir: float = Field(default=0.5, gt=0.0)
    gain: list[list[float]] | None = None
    initial_sigma_dir: float = Field(default=1.0, gt=0.0)
    frobenius_bound: float = Field(default=math.inf, gt=0.0)

    def build(self) -> PwaDynamics:
        state_dim = len(self.A[0])
        return PwaDynamics(
            state_matrices=self.A,
            input_matrices=self.B,
            offsets=self.offsets,
            classifier=AffineClassifier(
                directions=self.directions, offsets=self.classifier_offsets
            ),
            noise=NoiseChannel.gaussian_for(self.noise_sigma_dir, state_dim),
            noise_bound=self.noise_bound,
            lyapunov=self.lyapunov,
        )

    def exploration(self, input_dim: int) -> NoiseChannel:
        return NoiseChannel.gaussian_for(self.input_sigma_dir, input_dim)

    def feedback(self, dyn: PwaDynamics) -> FeedbackPolicy:
        exploration = self.exploration(dyn.input_dim)
        if self.gain is None:
            return FeedbackPolicy.exploring(dyn.input_dim, dyn.state_dim, exploration)
        return FeedbackPolicy(
            gain=self.gain, nominal=np.zeros(dyn.input_dim), exploration=exploration
        )

    def open_loop(self, dyn: PwaDynamics) -> OpenLoopPolicy:
        return OpenLoopPolicy(
            input_dim=dyn.input_dim, exploration=self.exploration(dyn.input_dim)
        )

    def initial(self, dyn: PwaDynamics) -> NoiseChannel:
        return NoiseChannel.gaussian_for(self.initial_sigma_dir, dyn.state_dim)


InstanceSpec = Annotated[
    RegressionInstanceSpec | DynamicsInstanceSpec, Field(discriminator="kind")
]


class ExperimentConfig(BaseModel):
    """Everything one experiment run needs; unknown keys are rejected."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    mode: Mode
    preset: str | None = None
    instance: InstanceSpec | None = None
    T: int = Field(default=20000, ge=1)
    H: int = Field(default=10, ge=1)
    seeds: list[int] = Field(default_factory=lambda: [0])
    # Schedule overrides; None keeps the default schedule.
    epoch_length: int | None = Field(default=None, ge=1)
    margin: float | None = Field(default=None, gt=0.0)
    step_size: float | None = Field(default=None, ge=0.0)
    cluster_threshold: int | None = Field(default=None, ge=0)
    merge_gap: float | None = Field(default=None, gt=0.0)
    bound: float | None = Field(default=None, gt=0.0, description="Learner's R.")
    restarts: int = Field(default=4, ge=1)
    max_iter: int = Field(default=20, ge=1)
    classifier_steps: int = Field(default=200, ge=1)
    solver: ClassifierSolver = "subgradient"
    # Simulation.
    rollouts: int = Field(default=128, ge=1, le=512)
    eval_every: int = Field(default=1, ge=1)
    projection: Literal["whitened", "sdp"] = "whitened"
    # Adversary.
    learner: ThresholdLearnerName = "halving"
    # Smoothness check.
    channel: ChannelKind = "gaussian"
    sigma: float = Field(default=1.0, ge=0.0)
    dimension: int = Field(default=3, ge=1)
    n_samples: int = Field(default=100000, ge=1000)
    n_directions: int = Field(default=16, ge=1)
    tolerance: float = Field(default=0.15, ge=0.0)
    convention: Convention = "definition"
    # Hard identification.
    hard_n: int = Field(default=100, ge=1)
    hard_mass: float = Field(default=1.0, gt=0.0)
    hard_runs: int = Field(default=200, ge=1)
    # ERM check.
    instances: int = Field(default=100, ge=1)
    n_points: int = Field(default=12, ge=2, le=24)
    # Output.
    output_dir: str = "runs"
    grid_cap: int = Field(default=64, ge=1)

    @field_validator("seeds", mode="before")
    @classmethod
    def _seeds(cls, value: Any) -> list[int]:
        return parse_seeds(value)

    def hinge(self, K: int, d: int, m: int, T: int | None = None) -> HingeConfig:
        """Schedule for horizon T (in samples) with this config's overrides."""
        gap = self.merge_gap
        if gap is None:
            gap = getattr(self.instance, "separation", 0.0) or 1.0
        return HingeConfig.schedule(
            T or self.T,
            K,
            d,
            m,
            merge_gap=gap,
            margin=self.margin,
            step_size=self.step_size,
            epoch_length=self.epoch_length,
            cluster_threshold=self.cluster_threshold,
        )

    def erm(self) -> ErmSettings:
        return ErmSettings(
            restarts=self.restarts,
            max_iter=self.max_iter,
            classifier_steps=self.classifier_steps,
            solver=self.solver,
        )

    def learner_bound(self) -> float:
        if self.bound is not None:
            return self.bound
        return getattr(self.instance, "frobenius_bound", math.inf)

    def echo(self) -> dict[str, Any]:
        return self.model_dump(mode="json", exclude={"seeds", "output_dir"})


def experiment_config(
    mode: Mode,
    preset: str | None = None,
    overrides: dict[str, Any] | None = None,
) -> ExperimentConfig:
    """Merge defaults, the preset section and overrides, then validate.

    Raises:
        ConfigError: On an unknown preset or any invalid or unknown key
    """
    Config()
    if preset is not None:
        Config.set_preset(preset)
    values = merge_sections(Config.section(preset or "default"), overrides or {})
    values.update({"mode": mode, "preset": preset})
    try:
        return ExperimentConfig.model_validate(values)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


def parse_grid(items: list[str]) -> dict[str, list[Any]]:
    """Grid axes from ``key=v1,v2`` or ``key=[v1, v2]`` strings."""
    grid: dict[str, list[Any]] = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"grid axis must look like key=v1,v2, got {item!r}")
        key, raw = item.split("=", 1)
        raw = raw.strip()
        try:
            values = yaml.safe_load(raw if raw.startswith("[") else f"[{raw}]")
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse grid values of {key}: {e}") from e
        if not isinstance(values, list) or not values:
            raise ConfigError(f"grid axis {key} has no values")
        grid[key.strip()] = values
    return grid


def expand_grid(grid: dict[str, list[Any]], cap: int) -> list[dict[str, Any]]:
    """Cartesian product of the axes as nested override dicts.

    An empty grid is the single empty cell.

    Raises:
        ConfigError: When the product has more than `cap` cells
    """
    size = math.prod(len(values) for values in grid.values())
    if size > cap:
        raise ConfigError(f"grid has {size} cells, the cap is {cap}")
    keys = list(grid)
    cells = []
    for combination in product(*(grid[key] for key in keys)):
        cell: dict[str, Any] = {}
        for key, value in zip(keys, combination, strict=True):
            _nest(cell, key, value)
        cells.append(cell)
    return cells
