"""Directionally smooth noise channels and an empirical smoothness check.

A distribution is sigma_dir-directionally smooth when every one-dimensional
projection puts mass at most ``delta / sigma_dir`` on any interval of
half-width ``delta``. Gaussian noise of scale sigma satisfies this with
``sigma_dir = sqrt(2 pi) sigma``; the uniform ball of radius sigma with
``sigma_dir = sigma / 2``.
"""

from collections.abc import Callable
import logging
import math
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.pwa.core import FloatArray, unit_vectors
from src.pwa.errors import DimensionError, InsufficientDataError

logger = logging.getLogger(__name__)

ChannelKind = Literal["gaussian", "uniform_ball", "point_mass", "custom"]
Convention = Literal["definition", "density"]

# Centers are scanned at this many empirical quantiles of each projection.
QUANTILE_COUNT = 64
WIDTH_FRACTIONS = (0.01, 0.05, 0.1)

Sampler = Callable[[np.random.Generator, int], FloatArray]


class NoiseChannel(BaseModel):
    """A noise law together with the directional smoothness it claims."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    kind: ChannelKind
    dimension: int = Field(..., ge=1)
    sigma: float = Field(default=1.0, ge=0.0)
    claimed_sigma_dir: float | None = Field(
        default=None, gt=0.0, description="Required for point_mass and custom."
    )
    sampler: Sampler | None = Field(default=None, exclude=True)

    @model_validator(mode="after")
    def _check(self) -> "NoiseChannel":
        if self.kind in ("gaussian", "uniform_ball") and self.sigma <= 0.0:
            raise ValueError("sigma must be > 0 for a smooth channel")
        if self.kind in ("point_mass", "custom") and self.claimed_sigma_dir is None:
            raise ValueError(f"{self.kind} channels need claimed_sigma_dir")
        if self.kind == "custom" and self.sampler is None:
            raise ValueError("custom channels need a sampler")
        return self

    @property
    def sigma_dir(self) -> float:
        match self.kind:
            case "gaussian":
                return math.sqrt(2.0 * math.pi) * self.sigma
            case "uniform_ball":
                return self.sigma / 2.0
            case _:
                assert self.claimed_sigma_dir is not None
                return self.claimed_sigma_dir

    def sample(self, rng: np.random.Generator, n: int) -> FloatArray:
        """Draw n noise vectors as the rows of an n x dimension array."""
        match self.kind:
            case "gaussian":
                return rng.normal(0.0, self.sigma, size=(n, self.dimension))
            case "uniform_ball":
                directions = unit_vectors(rng, n, self.dimension)
                radii = self.sigma * rng.random(n) ** (1.0 / self.dimension)
                return directions * radii[:, None]
            case "point_mass":
                return np.zeros((n, self.dimension))
            case _:
                assert self.sampler is not None
                draws = np.asarray(self.sampler(rng, n), dtype=np.float64)
                if draws.shape != (n, self.dimension):
                    raise DimensionError(f"custom sampler returned {draws.shape}")
                return draws

    @classmethod
    def gaussian_for(cls, sigma_dir: float, dimension: int) -> "NoiseChannel":
        """Gaussian channel whose claimed smoothness equals `sigma_dir`."""
        return cls(
            kind="gaussian",
            dimension=dimension,
            sigma=sigma_dir / math.sqrt(2.0 * math.pi),
        )


def sample_smoothed(
    z: ArrayLike, channel: NoiseChannel, rng: np.random.Generator
) -> FloatArray:
    """Return ``z + w`` with w drawn from the channel."""
    center = np.asarray(z, dtype=np.float64)
    if center.shape[-1] != channel.dimension:
        raise DimensionError(
            f"center has dimension {center.shape[-1]}, channel {channel.dimension}"
        )
    if center.ndim == 1:
        return center + channel.sample(rng, 1)[0]
    return center + channel.sample(rng, center.shape[0])


class SmoothnessReport(BaseModel):
    """Outcome of an interval-mass scan over random directions.

    `worst_density` is the largest ``mass / (2 delta)`` seen. Two ceilings are
    kept side by side: ``1 / sigma_dir`` read off the definition and the
    density ceiling ``2 / sigma_dir``; `convention` names the one `passed`
    was judged against.
    """

    model_config = ConfigDict(frozen=True)

    directions_tested: int
    n_samples: int
    sigma_dir: float
    worst_density: float
    worst_width: float
    definition_bound: float
    density_bound: float
    convention: Convention
    tolerance: float
    passed: bool

    @property
    def bound(self) -> float:
        if self.convention == "definition":
            return self.definition_bound
        return self.density_bound


def estimate_directional_smoothness(
    channel: NoiseChannel,
    z: ArrayLike,
    n_samples: int,
    n_directions: int,
    rng: np.random.Generator,
    widths: tuple[float, ...] = WIDTH_FRACTIONS,
    tolerance: float = 0.15,
    convention: Convention = "definition",
) -> SmoothnessReport:
    """Scan interval masses of ``<u, z + w>`` and compare with the claim.

    Args:
        channel: Channel under test
        z: Fixed center the noise is added to
        n_samples: Monte-Carlo sample size, at least 1000
        n_directions: Number of random unit directions
        rng: Random generator
        widths: Interval half-widths as fractions of sigma_dir
        tolerance: Relative slack allowed over the claimed bound
        convention: Which ceiling decides the pass flag

    Returns:
        The smoothness report
    """
    if n_samples < 1000:
        raise InsufficientDataError("the smoothness scan needs at least 1000 samples")
    center = np.asarray(z, dtype=np.float64)
    samples = sample_smoothed(
        np.broadcast_to(center, (n_samples, channel.dimension)), channel, rng
    )
    sigma_dir = channel.sigma_dir
    levels = (np.arange(QUANTILE_COUNT) + 0.5) / QUANTILE_COUNT

    worst_density, worst_width = 0.0, widths[0] * sigma_dir
    for direction in unit_vectors(rng, n_directions, channel.dimension):
        projections = np.sort(samples @ direction)
        centers = np.quantile(projections, levels)
        for fraction in widths:
            delta = fraction * sigma_dir
            upper = np.searchsorted(projections, centers + delta, side="right")
            lower = np.searchsorted(projections, centers - delta, side="left")
            density = float(np.max(upper - lower)) / n_samples / (2.0 * delta)
            if density > worst_density:
                worst_density, worst_width = density, delta

    definition_bound = 1.0 / sigma_dir
    density_bound = 2.0 / sigma_dir
    ceiling = definition_bound if convention == "definition" else density_bound
    passed = worst_density <= (1.0 + tolerance) * ceiling
    logger.info(
        f"Smoothness scan {channel.kind}: worst density {worst_density:.4f} "
        f"vs {ceiling:.4f} ({'pass' if passed else 'fail'})"
    )
    return SmoothnessReport(
        directions_tested=n_directions,
        n_samples=n_samples,
        sigma_dir=sigma_dir,
        worst_density=worst_density,
        worst_width=worst_width,
        definition_bound=definition_bound,
        density_bound=density_bound,
        convention=convention,
        tolerance=tolerance,
        passed=passed,
    )


def concatenated_smoothness_bound(sigma_dir: float, gain_norm: float) -> float:
    """Smoothness of ``[z | u]`` when ``u = K z + noise``.

    Both blocks being sigma_dir-smooth given the other, the concatenation is
    ``sigma_dir / sqrt((1 + ||K||_op)^2 + 1)``-smooth.
    """
    if sigma_dir <= 0.0:
        raise ValueError("sigma_dir must be > 0")
    if gain_norm < 0.0:
        raise ValueError("gain operator norm must be >= 0")
    return sigma_dir / math.sqrt((1.0 + gain_norm) ** 2 + 1.0)
