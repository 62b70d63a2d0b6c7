"""H-step simulation of learned dynamics and simulation-regret accounting.

Each episode draws a fresh initial state and an open-loop input sequence,
rolls the true system once to produce learner data, and compares batches of
true and simulated trajectories in squared Wasserstein-2 distance.
"""

from dataclasses import dataclass
from datetime import UTC, datetime
import logging
from typing import Any

import numpy as np
from numpy.typing import ArrayLike
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from src.pwa.core import AffineMap, FloatArray, IntArray, lift
from src.pwa.dynamics import (
    OpenLoopPolicy,
    ProjectionMethod,
    PwaDynamics,
    Trajectory,
    cone_transform,
    step_batch,
)
from src.pwa.erm import ErmSettings
from src.pwa.errors import DimensionError
from src.pwa.hinge import OgdWeights
from src.pwa.learner import EpochLearner, HingeConfig
from src.pwa.metrics import SCHEMA_VERSION
from src.pwa.smoothing import NoiseChannel

logger = logging.getLogger(__name__)

MAX_ASSIGNMENT_SIZE = 512


class LearnedModel(BaseModel):
    """Fitted maps on ``[z | u | 1]`` with the online mode classifier."""

    model_config = ConfigDict(frozen=True)

    maps: list[AffineMap]
    weights: OgdWeights

    @classmethod
    def zero(cls, K: int, state_dim: int, input_dim: int) -> "LearnedModel":
        width = state_dim + input_dim + 1
        return cls(
            maps=[AffineMap(matrix=np.zeros((state_dim, width)))] * K,
            weights=OgdWeights.zeros(K, width),
        )

    def step_batch(
        self, z: FloatArray, u: FloatArray, noise: FloatArray
    ) -> tuple[FloatArray, IntArray]:
        x_lift = lift(np.hstack([z, u]))
        modes = self.weights.predict(x_lift)
        stacked = np.stack([m.matrix for m in self.maps])
        return np.einsum("nij,nj->ni", stacked[modes], x_lift) + noise, modes


@dataclass
class RolloutBatch:
    """n rollouts of H steps: states ``(n, H + 1, d_z)``, inputs ``(n, H, d_u)``."""

    states: FloatArray
    inputs: FloatArray
    modes: IntArray

    @property
    def n(self) -> int:
        return int(self.states.shape[0])

    def flattened(self) -> FloatArray:
        """Each rollout as one vector ``(z_1..z_H, u_1..u_H)``."""
        H = self.inputs.shape[1]
        return np.hstack(
            [self.states[:, :H].reshape(self.n, -1), self.inputs.reshape(self.n, -1)]
        )

    def trajectories(self, episode: int = 0) -> list[Trajectory]:
        return [
            Trajectory(
                episode=episode,
                states=self.states[k],
                inputs=self.inputs[k],
                modes=self.modes[k],
            )
            for k in range(self.n)
        ]


def rollout(
    model: PwaDynamics | LearnedModel,
    initial: FloatArray,
    inputs: FloatArray,
    noise: FloatArray,
) -> RolloutBatch:
    """Roll a batch forward with all randomness supplied up front."""
    n, H, _ = inputs.shape
    states = np.empty((n, H + 1, initial.shape[1]))
    modes = np.empty((n, H), dtype=np.int64)
    states[:, 0] = initial
    for h in range(H):
        if isinstance(model, PwaDynamics):
            nxt, mode = step_batch(model, states[:, h], inputs[:, h], noise[:, h])
        else:
            nxt, mode = model.step_batch(states[:, h], inputs[:, h], noise[:, h])
        states[:, h + 1] = nxt
        modes[:, h] = mode
    return RolloutBatch(states=states, inputs=inputs, modes=modes)


@dataclass
class EpisodeDraws:
    """Initial states, inputs and process noise shared by coupled rollouts."""

    initial: FloatArray
    inputs: FloatArray
    noise: FloatArray


def draw_episode(
    dyn: PwaDynamics,
    policy: OpenLoopPolicy,
    initial: NoiseChannel,
    H: int,
    n: int,
    rng: np.random.Generator,
) -> EpisodeDraws:
    noise = dyn.sample_noise(rng, n * H).reshape(n, H, dyn.state_dim)
    return EpisodeDraws(
        initial=initial.sample(rng, n),
        inputs=policy.sample(H, rng, n),
        noise=noise,
    )


def simulate_episode(
    model: PwaDynamics | LearnedModel,
    dyn: PwaDynamics,
    policy: OpenLoopPolicy,
    initial: NoiseChannel,
    H: int,
    n_rollouts: int,
    rng: np.random.Generator,
) -> RolloutBatch:
    """n independent H-step rollouts of `model` with the noise law of `dyn`."""
    draws = draw_episode(dyn, policy, initial, H, n_rollouts, rng)
    return rollout(model, draws.initial, draws.inputs, draws.noise)


def wasserstein2_empirical(samples_a: ArrayLike, samples_b: ArrayLike) -> float:
    """Squared W2 between two uniform empirical measures of equal size."""
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape != b.shape:
        raise DimensionError(f"sample sets differ: {a.shape} vs {b.shape}")
    if a.shape[0] > MAX_ASSIGNMENT_SIZE:
        raise ValueError(f"at most {MAX_ASSIGNMENT_SIZE} samples per set")
    cost = cdist(a, b, metric="sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def coupled_distance(samples_a: FloatArray, samples_b: FloatArray) -> float:
    """Mean squared distance under the index coupling."""
    return float(np.mean(np.sum((samples_a - samples_b) ** 2, axis=1)))


def sampling_floor(
    dyn: PwaDynamics,
    policy: OpenLoopPolicy,
    initial: NoiseChannel,
    H: int,
    n_rollouts: int,
    rng: np.random.Generator,
) -> float:
    """W2 between two independent batches of true rollouts."""
    first = simulate_episode(dyn, dyn, policy, initial, H, n_rollouts, rng)
    second = simulate_episode(dyn, dyn, policy, initial, H, n_rollouts, rng)
    return wasserstein2_empirical(first.flattened(), second.flattened())


class SimRegReport(BaseModel):
    """W2 estimates at evaluated episodes and their running sum.

    Each estimate is weighted by the number of episodes it covers, so the
    total estimates the sum over all T episodes for any `eval_every`.
    """

    schema_version: int = SCHEMA_VERSION
    mode: str = "simulate"
    seed: int = 0
    config: dict[str, Any] = Field(default_factory=dict)
    episodes: list[int] = Field(default_factory=list)
    w2_assignment: list[float] = Field(default_factory=list)
    w2_coupled: list[float] = Field(default_factory=list)
    covers: list[int] = Field(
        default_factory=list, description="Episodes each evaluation stands for."
    )
    epochs: list[int] = Field(default_factory=list)
    floor: float | None = None
    created_at: str = Field(default_factory=lambda: datetime.now(UTC).isoformat())

    def weighted(self) -> FloatArray:
        values = np.asarray(self.w2_assignment, dtype=np.float64)
        return values * np.asarray(self.covers, dtype=np.float64)

    def cumulative(self) -> FloatArray:
        return np.cumsum(self.weighted())

    @property
    def total(self) -> float:
        return float(np.sum(self.weighted()))

    def has_nan(self) -> bool:
        values = np.asarray(self.w2_assignment + self.w2_coupled, dtype=np.float64)
        return bool(np.any(~np.isfinite(values)))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "episode": self.episodes,
                "epoch": self.epochs,
                "w2_assign": self.w2_assignment,
                "w2_coupled": self.w2_coupled,
                "covers": self.covers,
                "cumulative": self.cumulative(),
            }
        )

    def window_median(self, fraction: float, last: bool) -> float:
        """Median assignment estimate over the first or last share of episodes."""
        values = np.asarray(self.w2_assignment, dtype=np.float64)
        count = max(1, int(round(fraction * len(values))))
        return float(np.median(values[-count:] if last else values[:count]))

    def summary(self) -> dict[str, float]:
        row = {
            "seed": float(self.seed),
            "episodes": float(len(self.episodes)),
            "simulation_regret": self.total,
            "w2_first_tenth": self.window_median(0.1, last=False),
            "w2_last_tenth": self.window_median(0.1, last=True),
        }
        if self.floor is not None:
            row["floor"] = self.floor
        return row


def _learned(learner: EpochLearner, dyn: PwaDynamics) -> LearnedModel:
    if learner.state is None:
        return LearnedModel.zero(dyn.K, dyn.state_dim, dyn.input_dim)
    return LearnedModel(maps=learner.state.fit.maps, weights=learner.state.weights)


def simulation_regret(
    dyn: PwaDynamics,
    policy: OpenLoopPolicy,
    initial: NoiseChannel,
    T: int,
    H: int,
    config: HingeConfig,
    erm: ErmSettings,
    rng: np.random.Generator,
    bound: float = np.inf,
    n_rollouts: int = 128,
    eval_every: int = 1,
    projection: ProjectionMethod = "whitened",
    seed: int = 0,
    echo: dict[str, Any] | None = None,
) -> SimRegReport:
    """Learn the system episode by episode and score H-step simulations.

    `config.epoch_length` counts transitions, so it should be a multiple of H.
    Learned maps are projected onto the Lyapunov cone of ``dyn.lyapunov``
    (identity when absent) before reordering. Both estimators use the same
    two batches: true rollouts and learned rollouts driven by the same initial
    states, inputs and noise, so the coupled value bounds the assignment one.
    """
    if config.epoch_length % H:
        logger.warning(f"Epoch length {config.epoch_length} is not a multiple of H={H}")
    data_rng, eval_rng, learner_rng = rng.spawn(3)
    P = dyn.lyapunov if dyn.lyapunov is not None else np.eye(dyn.state_dim)
    learner = EpochLearner(
        dyn.K,
        bound,
        config,
        erm,
        learner_rng,
        response_dim=dyn.state_dim,
        map_transform=cone_transform(P, projection),
    )
    report = SimRegReport(seed=seed, config=echo or {})
    report.floor = sampling_floor(dyn, policy, initial, H, n_rollouts, eval_rng)

    for episode in range(T):
        if episode % eval_every == 0:
            draws = draw_episode(dyn, policy, initial, H, n_rollouts, eval_rng)
            true = rollout(dyn, draws.initial, draws.inputs, draws.noise)
            simulated = rollout(
                _learned(learner, dyn), draws.initial, draws.inputs, draws.noise
            )
            a, b = true.flattened(), simulated.flattened()
            report.episodes.append(episode)
            report.epochs.append(learner.epoch)
            report.w2_assignment.append(wasserstein2_empirical(a, b))
            report.w2_coupled.append(coupled_distance(a, b))
            report.covers.append(min(eval_every, T - episode))

        data = draw_episode(dyn, policy, initial, H, 1, data_rng)
        batch = rollout(dyn, data.initial, data.inputs, data.noise)
        covariates = np.hstack([batch.states[0, :H], batch.inputs[0]])
        learner.observe(covariates, batch.states[0, 1:])

    logger.info(
        f"Simulation seed {seed}: {len(report.episodes)} evaluations, "
        f"regret {report.total:.6g}, floor {report.floor:.6g}"
    )
    return report
