"""Ground-truth instances and the streams they emit.

Every generator owns its randomness through the generator passed in; hidden
modes are recorded on the emitted data for the evaluator and never handed to
a learner.
"""

from collections.abc import Callable
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations
import logging
import math
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.pwa.core import (
    TOL,
    AffineClassifier,
    AffineMap,
    Dimensions,
    FloatArray,
    IntArray,
    Observation,
    lift,
    unit_vectors,
)
from src.pwa.dynamics import PwaDynamics, step, truncate_rows
from src.pwa.errors import DimensionError
from src.pwa.metrics import GroundTruth
from src.pwa.smoothing import NoiseChannel

logger = logging.getLogger(__name__)

# Response noise is clipped at this many scales when truncation is on.
NOISE_TRUNCATION = 6.0
CLIP_WARNING_RATE = 0.01


class PwaRegressionModel(BaseModel):
    """Hidden maps and classifier plus the noise that wraps them."""

    model_config = ConfigDict(frozen=True)

    maps: list[AffineMap]
    classifier: AffineClassifier
    noise_scale: float = Field(default=0.0, ge=0.0, description="nu")
    channel: NoiseChannel
    corruption: float = Field(default=0.0, ge=0.0, description="epsilon_crp")
    covariate_bound: float = Field(default=np.inf, gt=1.0, description="B")
    separation: float = Field(default=0.0, ge=0.0, description="Delta_sep")
    truncate_noise: bool = False

    @model_validator(mode="after")
    def _check(self) -> "PwaRegressionModel":
        if not self.maps:
            raise DimensionError("a model needs at least one mode")
        shapes = {m.matrix.shape for m in self.maps}
        if len(shapes) != 1:
            raise DimensionError(f"maps disagree in shape: {sorted(shapes)}")
        if self.classifier.K != len(self.maps) or self.classifier.d != self.dims.d:
            raise DimensionError("classifier does not match the maps")
        if self.channel.dimension != self.dims.d:
            raise DimensionError("smoothing channel must live in the covariate space")
        gap = minimum_gap(self.maps)
        if gap < self.separation - TOL:
            raise ValueError(f"modes are {gap:.6g} apart, below {self.separation:.6g}")
        return self

    @property
    def dims(self) -> Dimensions:
        return Dimensions(d=self.maps[0].d, m=self.maps[0].m, K=len(self.maps))

    def truth(self) -> GroundTruth:
        return GroundTruth(maps=self.maps, classifier=self.classifier)


def minimum_gap(maps: list[AffineMap]) -> float:
    """Smallest pairwise Frobenius distance; +inf for a single map."""
    gaps = [a.distance(b) for a, b in combinations(maps, 2)]
    return min(gaps) if gaps else math.inf


ZPolicyName = Literal["fixed", "random", "random-walk", "boundary-hugging"]
ZCallback = Callable[[int, np.random.Generator], ArrayLike]


class ZPolicy(BaseModel):
    """How the pre-noise covariate centers z_t are chosen.

    `fixed` repeats `center`; `random` draws uniformly from the box of
    half-width `scale`; `random-walk` takes Gaussian steps of size `step`
    clipped to that box; `boundary-hugging` projects random box points onto
    the decision boundary between modes 0 and 1. A `callback` replaces all of
    these with a user-supplied ``(t, rng) -> z``.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    name: ZPolicyName = "random"
    scale: float = Field(default=1.0, ge=0.0)
    step: float = Field(default=0.1, ge=0.0)
    center: list[float] | None = None
    callback: ZCallback | None = Field(default=None, exclude=True)

    def centers(
        self, T: int, d: int, rng: np.random.Generator, classifier: AffineClassifier
    ) -> FloatArray:
        if self.callback is not None:
            return np.array(
                [np.asarray(self.callback(t, rng), dtype=np.float64) for t in range(T)]
            ).reshape(T, d)
        match self.name:
            case "fixed":
                base = np.zeros(d) if self.center is None else np.asarray(self.center)
                return np.tile(base, (T, 1))
            case "random":
                return rng.uniform(-self.scale, self.scale, size=(T, d))
            case "random-walk":
                steps = rng.normal(0.0, self.step, size=(T, d))
                walk = np.empty((T, d))
                position = np.zeros(d)
                for t in range(T):
                    position = np.clip(position + steps[t], -self.scale, self.scale)
                    walk[t] = position
                return walk
            case "boundary-hugging":
                return _boundary_points(classifier, rng, T, self.scale)
            case _:
                raise ValueError(f"Unknown z policy: {self.name}")


def _boundary_points(
    classifier: AffineClassifier, rng: np.random.Generator, T: int, scale: float
) -> FloatArray:
    """Random box points projected onto ``<w_0 - w_1, z> + b_0 - b_1 = 0``."""
    points = rng.uniform(-scale, scale, size=(T, classifier.d))
    if classifier.K < 2:
        return points
    normal = classifier.directions[0] - classifier.directions[1]
    offset = classifier.offsets[0] - classifier.offsets[1]
    norm2 = float(normal @ normal)
    if norm2 == 0.0:
        return points
    return points - np.outer((points @ normal + offset) / norm2, normal)


def _clip_covariates(x: FloatArray, bound: float) -> tuple[FloatArray, FloatArray]:
    """Rescale rows with ``||[x | 1]|| > B`` onto that sphere; returns a mask too."""
    if not np.isfinite(bound):
        return x, np.zeros(x.shape[0], dtype=bool)
    norms = np.linalg.norm(x, axis=1)
    clipped = norms**2 + 1.0 > bound**2
    radius = math.sqrt(bound**2 - 1.0)
    scaled = x.copy()
    scaled[clipped] *= (radius / norms[clipped])[:, None]
    return scaled, clipped


def _response_noise(
    model: PwaRegressionModel, rng: np.random.Generator, n: int
) -> tuple[FloatArray, FloatArray]:
    m = model.dims.m
    noise = rng.normal(0.0, model.noise_scale, size=(n, m))
    if model.truncate_noise:
        noise = truncate_rows(noise, NOISE_TRUNCATION * model.noise_scale)
    corruption = np.zeros((n, m))
    if model.corruption > 0.0:
        corruption = model.corruption * unit_vectors(rng, n, m)
    return noise, corruption


def emit_observation(
    model: PwaRegressionModel, z: ArrayLike, rng: np.random.Generator
) -> Observation:
    """Smooth z, classify, and emit ``y = Theta_i x_lift + e + delta``."""
    center = np.asarray(z, dtype=np.float64)
    if center.shape != (model.dims.d,):
        raise DimensionError(f"z must have shape ({model.dims.d},), got {center.shape}")
    raw = center + model.channel.sample(rng, 1)
    x, clipped = _clip_covariates(raw, model.covariate_bound)
    x_lift = lift(x[0])
    mode = int(model.classifier.predict(x)[0])
    noise, corruption = _response_noise(model, rng, 1)
    y = model.maps[mode].apply(x_lift) + noise[0] + corruption[0]
    return Observation(
        x=x[0],
        x_lift=x_lift,
        y=y,
        hidden_mode=mode,
        noise=noise[0],
        corruption=corruption[0],
        clipped=bool(clipped[0]),
    )


@dataclass
class Stream:
    """A recorded batch of rounds; `modes`, `noise` and `corruption` are hidden."""

    x: FloatArray
    y: FloatArray
    modes: IntArray
    noise: FloatArray
    corruption: FloatArray
    clipped: int = 0

    @property
    def x_lift(self) -> FloatArray:
        return lift(self.x)

    @property
    def T(self) -> int:  # noqa: N802
        return int(self.x.shape[0])

    @property
    def clip_rate(self) -> float:
        return self.clipped / self.T if self.T else 0.0

    def noise_floor(self) -> float:
        """Energy of the part of y no map explains: ``sum ||e + delta||^2``."""
        return float(np.sum((self.noise + self.corruption) ** 2))

    def observations(self) -> list[Observation]:
        return [
            Observation(
                x=self.x[t],
                x_lift=lift(self.x[t]),
                y=self.y[t],
                hidden_mode=int(self.modes[t]),
                noise=self.noise[t],
                corruption=self.corruption[t],
            )
            for t in range(self.T)
        ]

    def to_frame(self) -> pd.DataFrame:
        """One row per round: t, x..., y..., hidden_mode."""
        frame = pd.DataFrame({"t": np.arange(1, self.T + 1)})
        for k in range(self.x.shape[1]):
            frame[f"x{k}"] = self.x[:, k]
        for k in range(self.y.shape[1]):
            frame[f"y{k}"] = self.y[:, k]
        frame["hidden_mode"] = self.modes
        return frame


def emit_stream(
    model: PwaRegressionModel, policy: ZPolicy, T: int, rng: np.random.Generator
) -> Stream:
    """T rounds of `emit_observation` drawn in one batch."""
    d = model.dims.d
    centers = policy.centers(T, d, rng, model.classifier)
    x, clipped = _clip_covariates(
        centers + model.channel.sample(rng, T), model.covariate_bound
    )
    modes = model.classifier.predict(x)
    means = model.truth().means(lift(x), modes)
    noise, corruption = _response_noise(model, rng, T)
    stream = Stream(
        x=x,
        y=means + noise + corruption,
        modes=modes,
        noise=noise,
        corruption=corruption,
        clipped=int(clipped.sum()),
    )
    if stream.clip_rate > CLIP_WARNING_RATE:
        logger.warning(
            f"{stream.clip_rate:.2%} of covariates clipped to B={model.covariate_bound}"
        )
    return stream


def threshold_model(
    theta: float, channel: NoiseChannel | None = None
) -> PwaRegressionModel:
    """Two constant modes on the line: y = 1 for x <= theta, else y = 0.

    Mode 0 carries ``[0 | 1]`` and wins ties, so x = theta is labelled 1.
    """
    return PwaRegressionModel(
        maps=[AffineMap(matrix=[[0.0, 1.0]]), AffineMap(matrix=[[0.0, 0.0]])],
        classifier=AffineClassifier(directions=[[0.0], [1.0]], offsets=[0.0, -theta]),
        channel=channel
        or NoiseChannel(kind="point_mass", dimension=1, claimed_sigma_dir=1.0),
    )


@dataclass
class AdversaryState:
    """Signs so far and the current point ``1/2 + sum_s eps_s 2^(-s-1)``."""

    signs: list[int] = field(default_factory=list)
    x: Fraction = Fraction(1, 2)

    def advance(self, sign: int) -> None:
        if sign not in (-1, 1):
            raise ValueError(f"sign must be +1 or -1, got {sign}")
        self.x += sign * Fraction(1, 2 ** (len(self.signs) + 2))
        self.signs.append(sign)


@dataclass
class ThresholdStream:
    """The dyadic adversary's points, 0/1 labels and final threshold."""

    xs: list[Fraction]
    labels: list[int]
    signs: list[int]
    theta: Fraction


def adversarial_threshold_stream(T: int, rng: np.random.Generator) -> ThresholdStream:
    """Binary-expansion sequence that defeats any threshold learner.

    Rademacher signs move the point by ``2^(-t-1)`` and the final threshold is
    the point after the last move, so each label is the fresh sign. Label 1
    (``x <= theta``) corresponds to a + sign. Arithmetic is exact.
    """
    state = AdversaryState()
    xs: list[Fraction] = []
    signs = [int(s) for s in rng.choice([-1, 1], size=T)]
    for sign in signs:
        xs.append(state.x)
        state.advance(sign)
    theta = state.x
    labels = [int(x <= theta) for x in xs]
    return ThresholdStream(xs=xs, labels=labels, signs=signs, theta=theta)


HARD_OFFSET_BOUND = 4.0


def hard_identification_instance(
    N: int,
    j: int,
    iota: int,
    mass: float,
    noise: NoiseChannel | None = None,
) -> PwaDynamics:
    """Three-mode scalar system whose third mode hides in a segment of length 1/N.

    With ``alpha = j / N`` and ``beta = 1 / N``: mode 0 on ``x < 1 + alpha``,
    mode 2 on ``(1 + alpha, 1 + alpha + beta)`` with offset ``iota * mass``,
    mode 1 beyond. Scores are halved versions of ``0``,
    ``2 (x - (1 + alpha)) - beta`` and ``x - (1 + alpha)``; ties at the two
    breakpoints go to the lower index. Dynamics are ``x' = u + m_i + w``.
    """
    if N < 1 or not 1 <= j <= 2 * N:
        raise ValueError(f"need N >= 1 and 1 <= j <= 2N, got N={N}, j={j}")
    if iota not in (-1, 1):
        raise ValueError("iota must be +1 or -1")
    alpha, beta = j / N, 1.0 / N
    classifier = AffineClassifier(
        directions=[[0.0, 0.0], [1.0, 0.0], [0.5, 0.0]],
        offsets=[0.0, -(1.0 + alpha) - beta / 2.0, -(1.0 + alpha) / 2.0],
        offset_bound=HARD_OFFSET_BOUND,
    )
    return PwaDynamics(
        state_matrices=[[[0.0]]] * 3,
        input_matrices=[[[1.0]]] * 3,
        offsets=[[0.0], [0.0], [iota * mass]],
        classifier=classifier,
        noise=noise or NoiseChannel(kind="gaussian", dimension=1, sigma=0.01),
    )


class ExplorationResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    estimate: float
    truth: float
    visits: int
    failed: bool


def explore_hard_instance(
    dyn: PwaDynamics,
    T: int,
    rng: np.random.Generator,
    low: float = 0.0,
    high: float = 4.0,
) -> ExplorationResult:
    """Random-input explorer estimating the hidden offset of mode 2.

    Inputs are uniform on ``[low, high]``; residuals ``x' - u`` larger than
    half the offset magnitude are attributed to the hidden mode and averaged.
    With no such residual the estimate is 0. The run fails when the estimate
    misses by at least the offset magnitude.
    """
    truth = float(dyn.offsets[2][0])
    magnitude = abs(truth)
    state = np.zeros(1)
    residuals: list[float] = []
    for _ in range(T):
        u = rng.uniform(low, high, size=1)
        nxt, _mode = step(dyn, state, u, rng)
        residual = float(nxt[0] - u[0])
        if abs(residual) > magnitude / 2.0:
            residuals.append(residual)
        state = nxt
    estimate = float(np.mean(residuals)) if residuals else 0.0
    return ExplorationResult(
        estimate=estimate,
        truth=truth,
        visits=len(residuals),
        failed=abs(estimate - truth) >= magnitude,
    )


class SeparationSample(BaseModel):
    """Sampled maps with their smallest gap and the predicted lower bound."""

    model_config = ConfigDict(frozen=True)

    maps: list[AffineMap]
    gap: float
    predicted_bound: float

    @property
    def below_bound(self) -> bool:
        return self.gap < self.predicted_bound


def separation_lower_bound(
    K: int, m: int, d: int, sigma_dir: float, delta: float
) -> float:
    """``(m d / (4 sqrt(pi))) (sigma_dir delta / K^2)^(1 / (m d))``, +inf for K = 1."""
    if K == 1:
        return math.inf
    md = m * d
    return md / (4.0 * math.sqrt(math.pi)) * (sigma_dir * delta / K**2) ** (1.0 / md)


def sample_separated_parameters(
    K: int,
    m: int,
    d: int,
    bound: float,
    channel: NoiseChannel,
    delta: float,
    rng: np.random.Generator,
) -> SeparationSample:
    """Draw K smoothed m x d matrices inside the Frobenius ball of radius `bound`.

    Each matrix is a uniform point of the half-radius ball plus channel noise,
    radially projected back into the ball.
    """
    if not math.isfinite(bound):
        raise ValueError("parameters are sampled inside a finite Frobenius ball")
    if channel.dimension != m * d:
        raise DimensionError("the channel must act on vectorised m x d matrices")
    centers = unit_vectors(rng, K, m * d) * (
        bound / 2.0 * rng.random(K) ** (1.0 / (m * d))
    )[:, None]
    draws = centers + channel.sample(rng, K)
    maps = [AffineMap.projected(v.reshape(m, d), bound) for v in draws]
    return SeparationSample(
        maps=maps,
        gap=minimum_gap(maps),
        predicted_bound=separation_lower_bound(K, m, d, channel.sigma_dir, delta),
    )
