"""Epoch-based online prediction for piecewise-affine regression.

At every epoch boundary the learner refits the whole model on all past data,
reorders the fitted modes so that labels stay consistent with the previous
epoch, runs one lazy pass of projected OGD on the epoch that just ended and
then predicts through the next epoch with the model frozen.
"""

from collections.abc import Callable
from fractions import Fraction
import logging
import math
from typing import Any, Literal, Protocol

import numpy as np
from numpy.typing import ArrayLike
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.pwa.core import AffineMap, FloatArray, IntArray, as_float_array, lift
from src.pwa.erm import ErmFit, ErmSettings, fit_heuristic
from src.pwa.errors import DimensionError
from src.pwa.hinge import OgdWeights, hinge_losses, ogd_epoch
from src.pwa.metrics import (
    EpochCheckpoint,
    GroundTruth,
    RunReport,
    covariance_spectrum,
    match_permutation,
    pair_counts,
)

logger = logging.getLogger(__name__)

MapTransform = Callable[[list[AffineMap]], list[AffineMap]]


def default_cluster_threshold(epoch_length: int, K: int, d: int, m: int) -> int:
    return int(max(10 * (d + 1) * m, math.ceil(epoch_length / (4 * K))))


class HingeConfig(BaseModel):
    """Margin, step size, epoch length, cluster threshold and merge gap."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    margin: float = Field(..., gt=0.0)
    step_size: float = Field(..., ge=0.0)
    epoch_length: int = Field(..., ge=1)
    cluster_threshold: int = Field(..., ge=0)
    merge_gap: float = Field(..., gt=0.0)

    @classmethod
    def schedule(
        cls,
        T: int,
        K: int,
        d: int,
        m: int,
        merge_gap: float = 1.0,
        **overrides: Any,
    ) -> "HingeConfig":
        """Schedule E = T^(17/18), gamma = T^(-1/36) and eta = T^(-19/36).

        Any field passed in `overrides` (and not None) replaces the default.
        """
        if T < 1:
            raise ValueError("T must be >= 1")
        epoch_length = min(T, max(1, round(T ** (17 / 18))))
        values: dict[str, Any] = {
            "margin": T ** (-1 / 36),
            "step_size": T ** (-19 / 36),
            "epoch_length": epoch_length,
            "merge_gap": merge_gap,
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        values.setdefault(
            "cluster_threshold",
            default_cluster_threshold(int(values["epoch_length"]), K, d, m),
        )
        if values["epoch_length"] > T:
            raise ValueError("epoch length exceeds the horizon")
        return cls(**values)


class ReorderResult(BaseModel):
    """A relabelled fit plus the bookkeeping of how it was relabelled."""

    model_config = ConfigDict(frozen=True)

    fit: ErmFit
    merged: list[tuple[int, int]] = Field(default_factory=list)
    permutation: list[int]


def reorder(
    current: ErmFit,
    previous: list[AffineMap] | None,
    counts: ArrayLike,
    threshold: float,
    gap: float,
) -> ReorderResult:
    """Merge near-duplicate large clusters, then align labels with the last epoch.

    Args:
        current: Freshly fitted model
        previous: Maps of the previous epoch, None in the first epoch
        counts: Points per label of `current` over all data so far
        threshold: Cluster size A above which a cluster counts as large
        gap: Merge gap; large clusters closer than this are merged

    Returns:
        The relabelled fit. Merging relabels j into i < j; alignment renames
        every large cluster, biggest first, to its nearest unclaimed previous
        map index and hands the remaining indices to the rest in order.
    """
    K = current.K
    sizes = np.asarray(counts, dtype=np.float64).copy()
    merge = np.arange(K)
    merged: list[tuple[int, int]] = []
    for i in range(K):
        if merge[i] != i:
            continue
        for j in range(i + 1, K):
            if merge[j] != j or min(sizes[i], sizes[j]) < threshold:
                continue
            if current.maps[i].distance(current.maps[j]) < gap:
                merge[merge == j] = i
                sizes[i] += sizes[j]
                sizes[j] = 0.0
                merged.append((i, j))

    permutation = list(range(K))
    if previous is not None:
        large = [i for i in np.argsort(-sizes, kind="stable") if sizes[i] > threshold]
        claimed: dict[int, int] = {}
        for i in large:
            free = [p for p in range(K) if p not in claimed.values()]
            distances = [current.maps[i].distance(previous[p]) for p in free]
            claimed[int(i)] = free[int(np.argmin(distances))]
        rest = iter(p for p in range(K) if p not in claimed.values())
        permutation = [claimed[i] if i in claimed else next(rest) for i in range(K)]

    maps: list[AffineMap] = [current.maps[0]] * K
    for i, target in enumerate(permutation):
        maps[target] = current.maps[i]
    relabel = np.asarray(permutation)[merge]
    fit = current.model_copy(
        update={"maps": maps, "label_map": relabel[current.label_map]}
    )
    return ReorderResult(fit=fit, merged=merged, permutation=permutation)


class EpochState(BaseModel):
    """Learner state after the fit at the start of epoch `epoch`."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    epoch: int
    fit: ErmFit
    weights: OgdWeights
    previous_maps: list[AffineMap] | None = None
    merged: list[tuple[int, int]] = Field(default_factory=list)
    labels: np.ndarray = Field(..., description="Fitted labels of all past data.")
    ogd_loss: float = 0.0

    @model_validator(mode="after")
    def _k_maps(self) -> "EpochState":
        if len(self.fit.maps) != self.weights.K:
            raise DimensionError("fit and OGD weights disagree on K")
        return self


class EpochLearner:
    """Online learner: `predict` a batch, then `observe` its responses.

    The model only changes when the observed data reach a multiple of the
    epoch length, so a whole epoch may be predicted in one call.
    """

    def __init__(
        self,
        K: int,
        bound: float,
        config: HingeConfig,
        erm: ErmSettings,
        rng: np.random.Generator,
        response_dim: int,
        map_transform: MapTransform | None = None,
    ):
        self.K = K
        self.bound = bound
        self.config = config
        self.erm = erm
        self.rng = rng
        self.response_dim = response_dim
        self.map_transform = map_transform
        self.state: EpochState | None = None
        self.history: list[EpochState] = []
        self._x: list[FloatArray] = []
        self._y: list[FloatArray] = []
        self._seen = 0

    @property
    def epoch(self) -> int:
        return 0 if self.state is None else self.state.epoch

    def predict(self, x: ArrayLike) -> tuple[FloatArray, IntArray]:
        """Predicted responses and online modes for raw covariates."""
        batch = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.state is None:
            return np.zeros((batch.shape[0], self.response_dim)), np.zeros(
                batch.shape[0], dtype=np.int64
            )
        x_lift = lift(batch)
        modes = self.state.weights.predict(x_lift)
        stacked = np.stack([m.matrix for m in self.state.fit.maps])
        return np.einsum("nij,nj->ni", stacked[modes], x_lift), modes

    def observe(self, x: ArrayLike, y: ArrayLike) -> None:
        """Record responses; closes every epoch boundary crossed on the way."""
        covariates = as_float_array(np.atleast_2d(x), 2)
        responses = as_float_array(np.atleast_2d(y), 2)
        if covariates.shape[0] != responses.shape[0]:
            raise DimensionError("covariates and responses differ in length")
        start = 0
        E = self.config.epoch_length
        while start < covariates.shape[0]:
            room = E - self._seen % E
            stop = min(covariates.shape[0], start + room)
            self._x.append(covariates[start:stop])
            self._y.append(responses[start:stop])
            self._seen += stop - start
            start = stop
            if self._seen % E == 0:
                self._close_epoch()

    def _close_epoch(self) -> None:
        x_all = np.vstack(self._x)
        y_all = np.vstack(self._y)
        self._x, self._y = [x_all], [y_all]
        E = self.config.epoch_length
        warm = None if self.state is None else self.state.fit.predict(x_all)

        fit = fit_heuristic(x_all, y_all, self.K, self.bound, self.erm, self.rng, warm)
        if self.map_transform is not None:
            fit = fit.model_copy(update={"maps": self.map_transform(fit.maps)})
        counts = np.bincount(fit.predict(x_all), minlength=self.K)
        previous = None if self.state is None else self.state.fit.maps
        result = reorder(
            fit,
            previous,
            counts,
            self.config.cluster_threshold,
            self.config.merge_gap,
        )
        labels = result.fit.predict(x_all)

        weights = (
            OgdWeights.zeros(self.K, x_all.shape[1] + 1)
            if self.state is None
            else self.state.weights
        )
        recent = lift(x_all[-E:])
        ogd_loss = float(
            hinge_losses(weights.weights, recent, labels[-E:], self.config.margin).sum()
        )
        weights = ogd_epoch(
            weights, recent, labels[-E:], self.config.margin, self.config.step_size
        )
        self.state = EpochState(
            epoch=self.epoch + 1,
            fit=result.fit,
            weights=weights,
            previous_maps=previous,
            merged=result.merged,
            labels=labels,
            ogd_loss=ogd_loss,
        )
        self.history.append(self.state)
        logger.info(
            f"Epoch {self.state.epoch}: {len(y_all)} points, "
            f"objective {fit.objective:.6g}, merged {result.merged}"
        )


def _checkpoint(
    state: EpochState, x_all: FloatArray, truth: GroundTruth
) -> EpochCheckpoint:
    x_lift = lift(x_all)
    true_modes = truth.modes(x_lift)
    matching = match_permutation(state.fit.maps, truth.maps)
    errors = [
        state.fit.maps[i].distance(truth.maps[j]) ** 2
        for i, j in enumerate(matching.nearest)
    ]
    return EpochCheckpoint(
        epoch=state.epoch,
        samples=int(x_all.shape[0]),
        objective=state.fit.objective,
        restarts=state.fit.restarts,
        merged=state.merged,
        matching=matching.nearest,
        assignment=matching.assignment,
        parameter_errors=errors,
        pair_counts=pair_counts(state.labels, true_modes, truth.K),
        spectra=covariance_spectrum(x_lift, state.labels, true_modes, truth.K),
    )


def run(
    x: ArrayLike,
    y: ArrayLike,
    K: int,
    bound: float,
    config: HingeConfig,
    erm: ErmSettings,
    rng: np.random.Generator,
    truth: GroundTruth,
    seed: int = 0,
    mode: str = "regress",
    echo: dict[str, Any] | None = None,
) -> RunReport:
    """Play the online protocol over a recorded stream and score it.

    The learner only ever receives ``(x_t, y_t)``; `truth` is used to score
    predictions against ``Theta*_{g*(x)} x_lift`` and to build checkpoints.
    A stream that ends mid-epoch is fine.
    """
    covariates = as_float_array(x, 2)
    responses = as_float_array(y, 2)
    learner = EpochLearner(K, bound, config, erm, rng, responses.shape[1])
    report = RunReport(mode=mode, seed=seed, config=echo or {})
    E = config.epoch_length
    total_loss = 0.0
    noise_floor = 0.0
    ogd_loss = 0.0

    for start in range(0, covariates.shape[0], E):
        chunk_x = covariates[start : start + E]
        chunk_y = responses[start : start + E]
        x_lift = lift(chunk_x)
        predicted, modes = learner.predict(chunk_x)
        true_modes = truth.modes(x_lift)
        means = truth.means(x_lift, true_modes)

        matching = (
            np.asarray(report.checkpoints[-1].matching)
            if report.checkpoints
            else np.arange(K)
        )
        report.regret.extend(np.sum((predicted - means) ** 2, axis=1).tolist())
        report.mistakes.extend((matching[modes] != true_modes).astype(int).tolist())
        report.epochs.extend([learner.epoch] * len(chunk_x))
        if report.checkpoints:
            report.checkpoints[-1].prediction_counts = pair_counts(modes, true_modes, K)
        total_loss += float(np.sum((predicted - chunk_y) ** 2))
        noise_floor += float(np.sum((chunk_y - means) ** 2))

        before = learner.epoch
        learner.observe(chunk_x, chunk_y)
        if learner.state is not None and learner.epoch != before:
            seen = covariates[: start + len(chunk_x)]
            report.checkpoints.append(_checkpoint(learner.state, seen, truth))
            ogd_loss += learner.state.ogd_loss

    report.total_loss = total_loss
    report.noise_floor = noise_floor
    report.extras["ogd_hinge_loss"] = ogd_loss
    logger.info(
        f"Run seed {seed}: regret {report.total_regret:.6g} over "
        f"{len(report.regret)} rounds, {len(report.checkpoints)} epochs"
    )
    return report


class ThresholdLearner(Protocol):
    """Predicts 0/1 labels of points in (0, 1) and learns from the truth."""

    def predict(self, x: Fraction) -> int: ...

    def update(self, x: Fraction, label: int) -> None: ...


class HalvingThresholdLearner:
    """Keeps the interval of thresholds consistent with the past.

    Label 1 means ``x <= theta``. Inside the interval it predicts the label
    held by the larger share of consistent thresholds.
    """

    def __init__(self) -> None:
        self.low = Fraction(0)
        self.high = Fraction(1)

    def predict(self, x: Fraction) -> int:
        if x <= self.low:
            return 1
        if x > self.high:
            return 0
        return int(x <= (self.low + self.high) / 2)

    def update(self, x: Fraction, label: int) -> None:
        if label == 1:
            self.low = max(self.low, x)
        else:
            self.high = min(self.high, x)


class ConstantThresholdLearner:
    def __init__(self, label: int = 1) -> None:
        self.label = label

    def predict(self, x: Fraction) -> int:
        return self.label

    def update(self, x: Fraction, label: int) -> None:
        return None


class EpochThresholdLearner:
    """The piecewise-affine epoch learner on the two-mode threshold model."""

    def __init__(
        self, config: HingeConfig, erm: ErmSettings, rng: np.random.Generator
    ) -> None:
        self.inner = EpochLearner(2, 2.0, config, erm, rng, response_dim=1)

    def predict(self, x: Fraction) -> int:
        predicted, _ = self.inner.predict(np.array([[float(x)]]))
        return int(predicted[0, 0] >= 0.5)

    def update(self, x: Fraction, label: int) -> None:
        self.inner.observe(np.array([[float(x)]]), np.array([[float(label)]]))


ThresholdLearnerName = Literal["halving", "constant", "epoch"]


def make_threshold_learner(
    name: ThresholdLearnerName,
    T: int,
    erm: ErmSettings,
    rng: np.random.Generator,
) -> ThresholdLearner:
    match name:
        case "halving":
            return HalvingThresholdLearner()
        case "constant":
            return ConstantThresholdLearner()
        case "epoch":
            config = HingeConfig.schedule(T, K=2, d=1, m=1)
            return EpochThresholdLearner(config, erm, rng)
        case _:
            raise ValueError(f"Unknown threshold learner: {name}")


def play_threshold_game(
    xs: list[Fraction], labels: list[int], learner: ThresholdLearner
) -> list[int]:
    """Mistake flags of a learner on a labelled sequence, in order."""
    mistakes = []
    for x, label in zip(xs, labels, strict=True):
        mistakes.append(int(learner.predict(x) != label))
        learner.update(x, label)
    return mistakes
