"""Offline fitting of a piecewise-affine model to unlabelled data.

The heuristic oracle alternates between least-squares refits of every mode and
a hinge fit of the classifier, restarting from several initial partitions and
keeping the best objective. An exhaustive oracle for tiny one-dimensional
inputs serves as the reference in tests.
"""

from itertools import combinations
import logging
from typing import Any, Literal

import numpy as np
from numpy.typing import ArrayLike
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.optimize import linprog
from scipy.sparse import lil_matrix
from sklearn.cluster import KMeans

from src.pwa.core import (
    AffineClassifier,
    AffineMap,
    FloatArray,
    IntArray,
    as_float_array,
    lift,
)
from src.pwa.errors import DimensionError, InsufficientDataError
from src.pwa.hinge import hinge_losses, mean_hinge_subgradient, project_weights

logger = logging.getLogger(__name__)

ClassifierSolver = Literal["subgradient", "lp"]

# Gram matrices beyond this condition number get a Tikhonov jitter.
CONDITION_LIMIT = 1e12
JITTER = 1e-10

BRUTE_FORCE_MAX_POINTS = 24
BRUTE_FORCE_MAX_MODES = 3


class ErmSettings(BaseModel):
    """Knobs of the alternating oracle."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    restarts: int = Field(default=4, ge=1)
    max_iter: int = Field(default=20, ge=1)
    margin: float = Field(default=0.1, gt=0.0)
    classifier_steps: int = Field(default=200, ge=1)
    solver: ClassifierSolver = "subgradient"


class ErmFit(BaseModel):
    """A fitted model: K maps, a classifier and an optional label relabelling.

    `label_map[k]` is the reported mode of base classifier output k; reordering
    after an epoch only ever touches this map and the order of `maps`.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    maps: list[AffineMap]
    classifier: AffineClassifier
    label_map: np.ndarray
    objective: float
    restarts: int = 1
    iterations: int = 0
    best_restart: int = 0
    objective_trace: list[float] = Field(default_factory=list)
    eps_orac_estimate: float | None = None

    @field_validator("label_map", mode="before")
    @classmethod
    def _to_labels(cls, value: ArrayLike) -> IntArray:
        return np.asarray(value, dtype=np.int64)

    @property
    def K(self) -> int:  # noqa: N802
        return len(self.maps)

    def predict(self, x: ArrayLike) -> IntArray:
        """Mode of raw (unlifted) covariates."""
        return self.label_map[self.classifier.predict(x)]

    def to_dict(self) -> dict[str, Any]:
        return {
            "maps": [m.to_dict() for m in self.maps],
            "classifier": self.classifier.to_dict(),
            "label_map": self.label_map.tolist(),
            "objective": self.objective,
            "restarts": self.restarts,
            "iterations": self.iterations,
            "eps_orac_estimate": self.eps_orac_estimate,
        }


def least_squares_mode(
    x_lift: FloatArray, y: FloatArray, bound: float = np.inf
) -> AffineMap:
    """Least-squares map from lifted covariates to responses.

    Solved through the normal equations; a singular or badly conditioned Gram
    matrix gets a 1e-10 ridge. The result is projected onto the Frobenius ball.
    """
    gram = x_lift.T @ x_lift
    rhs = x_lift.T @ y
    if x_lift.shape[0] < x_lift.shape[1] or np.linalg.cond(gram) > CONDITION_LIMIT:
        gram = gram + JITTER * np.eye(gram.shape[0])
    solution = np.linalg.solve(gram, rhs)
    return AffineMap.projected(solution.T, bound)


def squared_residuals(
    maps: list[AffineMap], x_lift: FloatArray, y: FloatArray
) -> FloatArray:
    """``||Theta_k x_t - y_t||^2`` with points as rows and modes as columns."""
    stacked = np.stack([m.matrix for m in maps])
    predictions = np.einsum("kij,nj->nki", stacked, x_lift)
    return np.sum((predictions - y[:, None, :]) ** 2, axis=2)


def objective_value(
    maps: list[AffineMap], labels: IntArray, x_lift: FloatArray, y: FloatArray
) -> float:
    residuals = squared_residuals(maps, x_lift, y)
    return float(residuals[np.arange(len(labels)), labels].sum())


def _fit_maps(
    x_lift: FloatArray,
    y: FloatArray,
    labels: IntArray,
    previous: list[AffineMap],
    bound: float,
) -> list[AffineMap]:
    """Refit every non-empty mode; empty modes keep their previous map."""
    maps = []
    for k, prior in enumerate(previous):
        members = labels == k
        if np.any(members):
            maps.append(least_squares_mode(x_lift[members], y[members], bound))
        else:
            maps.append(prior)
    return maps


def _fit_classifier_subgradient(
    x_lift: FloatArray,
    labels: IntArray,
    K: int,
    settings: ErmSettings,
    start: FloatArray | None,
) -> FloatArray:
    weights = np.zeros((K, x_lift.shape[1])) if start is None else start.copy()
    best, best_key = weights, (np.inf, np.inf)
    for k in range(1, settings.classifier_steps + 1):
        disagreements = int(np.sum(np.argmax(x_lift @ weights.T, axis=1) != labels))
        loss = float(hinge_losses(weights, x_lift, labels, settings.margin).mean())
        if (disagreements, loss) < best_key:
            best, best_key = weights, (disagreements, loss)
        if disagreements == 0 and loss == 0.0:
            break
        grad = mean_hinge_subgradient(weights, x_lift, labels, settings.margin)
        weights = project_weights(weights - settings.margin / np.sqrt(k) * grad)
    return best


def _fit_classifier_lp(x_lift: FloatArray, labels: IntArray, K: int) -> FloatArray:
    """Exact multi-class hinge minimisation as a linear program.

    Variables are the K weight rows (box-bounded) followed by one slack per
    point; rows are rescaled into the unit balls afterwards.
    """
    n, p = x_lift.shape
    n_weights = K * p
    constraints = lil_matrix((n * (K - 1), n_weights + n))
    row = 0
    for t in range(n):
        for j in range(K):
            if j == labels[t]:
                continue
            own = labels[t] * p
            constraints[row, own : own + p] = -x_lift[t]
            constraints[row, j * p : (j + 1) * p] = x_lift[t]
            constraints[row, n_weights + t] = -1.0
            row += 1
    cost = np.concatenate([np.zeros(n_weights), np.ones(n)])
    box = 1e6
    bounds = [(-box, box)] * n_weights + [(0.0, None)] * n
    result = linprog(
        cost,
        A_ub=constraints.tocsr(),
        b_ub=-np.ones(n * (K - 1)),
        bounds=bounds,
        method="highs",
    )
    if not result.success:
        logger.warning(f"Classifier LP failed: {result.message}")
        return np.zeros((K, p))
    weights = result.x[:n_weights].reshape(K, p)
    scale = max(1.0, float(np.linalg.norm(weights, axis=1).max()))
    return weights / scale


def fit_classifier(
    x_lift: FloatArray,
    labels: IntArray,
    K: int,
    settings: ErmSettings,
    start: FloatArray | None = None,
) -> FloatArray:
    """Fit K unit-ball weight rows to a labelling of lifted covariates."""
    if K == 1:
        return np.zeros((1, x_lift.shape[1]))
    if settings.solver == "lp":
        return _fit_classifier_lp(x_lift, labels, K)
    return _fit_classifier_subgradient(x_lift, labels, K, settings, start)


def _reseed_empty(labels: IntArray, residuals: FloatArray, K: int) -> IntArray:
    """Give every empty mode the worst-fit point of the current assignment."""
    labels = labels.copy()
    for k in range(K):
        if np.any(labels == k):
            continue
        own = residuals[np.arange(len(labels)), labels]
        sizes = np.bincount(labels, minlength=K)
        own[sizes[labels] <= 1] = -np.inf
        if not np.isfinite(own.max()):
            continue
        labels[int(np.argmax(own))] = k
    return labels


class _Restart(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    maps: list[AffineMap]
    weights: np.ndarray
    objective: float
    iterations: int
    trace: list[float]


def _alternate(
    x_lift: FloatArray,
    y: FloatArray,
    initial: IntArray,
    K: int,
    bound: float,
    settings: ErmSettings,
) -> _Restart:
    """Alternating minimisation from one initial partition.

    Every accepted iterate has an objective no larger than the last one, so
    the trace is non-increasing.
    """
    m = y.shape[1]
    zero = [AffineMap(matrix=np.zeros((m, x_lift.shape[1])), frobenius_bound=bound)] * K
    weights = fit_classifier(x_lift, initial, K, settings)
    labels = np.argmax(x_lift @ weights.T, axis=1)
    seeded = _fit_maps(x_lift, y, initial, zero, bound)
    maps = _fit_maps(x_lift, y, labels, seeded, bound)
    objective = objective_value(maps, labels, x_lift, y)
    trace = [objective]
    iterations = 0
    for _ in range(settings.max_iter):
        residuals = squared_residuals(maps, x_lift, y)
        assigned = _reseed_empty(np.argmin(residuals, axis=1), residuals, K)
        candidate_w = fit_classifier(x_lift, assigned, K, settings, start=weights)
        candidate_labels = np.argmax(x_lift @ candidate_w.T, axis=1)
        candidate_maps = _fit_maps(x_lift, y, candidate_labels, maps, bound)
        candidate = objective_value(candidate_maps, candidate_labels, x_lift, y)
        if candidate > objective:
            break
        iterations += 1
        unchanged = np.array_equal(candidate_labels, labels)
        weights, labels = candidate_w, candidate_labels
        maps, objective = candidate_maps, candidate
        trace.append(objective)
        if unchanged:
            break
    return _Restart(
        maps=maps,
        weights=weights,
        objective=objective,
        iterations=iterations,
        trace=trace,
    )


def _kmeans_labels(
    x_lift: FloatArray, y: FloatArray, K: int, rng: np.random.Generator
) -> IntArray:
    features = np.hstack([x_lift[:, :-1], y])
    clusters = min(K, len(np.unique(features, axis=0)))
    if clusters <= 1:
        return np.zeros(x_lift.shape[0], dtype=np.int64)
    model = KMeans(n_clusters=clusters, n_init=1, random_state=int(rng.integers(2**31)))
    return model.fit_predict(features).astype(np.int64)


def _split_labels(
    x_lift: FloatArray, K: int, rng: np.random.Generator, position: int
) -> IntArray:
    """Cut a random projection of the covariates into K contiguous blocks."""
    n, d = x_lift.shape[0], x_lift.shape[1] - 1
    direction = rng.standard_normal(d)
    order = np.argsort(x_lift[:, :-1] @ direction, kind="stable")
    cuts = np.sort(
        np.concatenate([[position], rng.integers(1, max(n, 2), size=K - 2)])
    )[: K - 1]
    labels = np.empty(n, dtype=np.int64)
    labels[order] = np.searchsorted(cuts, np.arange(n), side="right")
    return labels


def initial_partitions(
    x_lift: FloatArray,
    y: FloatArray,
    K: int,
    restarts: int,
    rng: np.random.Generator,
    warm: IntArray | None = None,
) -> list[tuple[str, IntArray]]:
    """Initial labellings, one per restart, in a fixed order.

    The first is the warm start when given, else k-means on ``[x | y]``. Every
    fourth restart is a uniformly random labelling; the rest are projection
    splits whose cut positions run through a permutation of ``1..n-1``.
    """
    n = x_lift.shape[0]
    positions = rng.permutation(np.arange(1, max(n, 2)))
    partitions: list[tuple[str, IntArray]] = []
    for r in range(restarts):
        if r == 0 and warm is not None:
            partitions.append(("warm", np.asarray(warm, dtype=np.int64)))
        elif r == 0 or (r == 1 and warm is not None):
            partitions.append(("kmeans", _kmeans_labels(x_lift, y, K, rng)))
        elif r % 4 == 3:
            partitions.append(("random", rng.integers(K, size=n).astype(np.int64)))
        else:
            position = int(positions[r % len(positions)])
            partitions.append(("split", _split_labels(x_lift, K, rng, position)))
    return partitions


def _check_data(x: ArrayLike, y: ArrayLike, K: int) -> tuple[FloatArray, FloatArray]:
    covariates = as_float_array(x, 2)
    responses = as_float_array(y, 2)
    if covariates.shape[0] != responses.shape[0]:
        raise DimensionError("covariates and responses differ in length")
    if covariates.shape[0] == 0:
        raise InsufficientDataError("cannot fit on an empty data set")
    if K < 1:
        raise ValueError("K must be >= 1")
    if K > covariates.shape[0]:
        raise InsufficientDataError(
            f"cannot fit {K} modes on {covariates.shape[0]} points"
        )
    return covariates, responses


def fit_heuristic(
    x: ArrayLike,
    y: ArrayLike,
    K: int,
    bound: float,
    settings: ErmSettings,
    rng: np.random.Generator,
    warm: IntArray | None = None,
    noise_floor: float | None = None,
) -> ErmFit:
    """Alternating-minimisation ERM over K affine modes.

    Args:
        x: Raw covariates, n x d
        y: Responses, n x m
        K: Number of modes
        bound: Frobenius bound R on every map
        settings: Oracle knobs
        rng: Random generator for the initial partitions
        warm: Optional labelling to start the first restart from
        noise_floor: Noise energy on the data, for the suboptimality estimate

    Returns:
        The best fit over all restarts, ties to the earliest restart
    """
    covariates, responses = _check_data(x, y, K)
    x_lift = lift(covariates)
    partitions = initial_partitions(
        x_lift, responses, K, settings.restarts, rng, warm
    )

    best: _Restart | None = None
    best_index = 0
    for index, (kind, labels) in enumerate(partitions):
        result = _alternate(x_lift, responses, labels, K, bound, settings)
        logger.debug(f"Restart {index} ({kind}): objective {result.objective:.6g}")
        if best is None or result.objective < best.objective:
            best, best_index = result, index
    assert best is not None

    fit = ErmFit(
        maps=best.maps,
        classifier=AffineClassifier.from_lifted(best.weights),
        label_map=np.arange(K),
        objective=best.objective,
        restarts=len(partitions),
        iterations=best.iterations,
        best_restart=best_index,
        objective_trace=best.trace,
        eps_orac_estimate=(
            best.objective - noise_floor if noise_floor is not None else None
        ),
    )
    logger.info(
        f"ERM on {len(responses)} points: objective {fit.objective:.6g} "
        f"(restart {best_index}/{len(partitions)})"
    )
    return fit


def _interval_classifier(breaks: list[float], K: int) -> AffineClassifier:
    """Classifier on the real line with mode i on the i-th interval.

    Score i is ``i x - sum_{k <= i} t_k``, so neighbours cross exactly at
    the break t_i; everything is scaled so slopes stay in [0, 1]. Unused modes
    score -1, below mode 0's constant zero score.
    """
    used = len(breaks) + 1
    scale = float(max(1, used - 1))
    slopes = np.zeros(K)
    offsets = np.full(K, -1.0)
    offsets[0] = 0.0
    for i in range(1, used):
        slopes[i] = i / scale
        offsets[i] = -float(np.sum(breaks[:i])) / scale
    bound = float(np.max(np.abs(offsets))) + 1.0
    return AffineClassifier(
        directions=slopes.reshape(K, 1), offsets=offsets, offset_bound=bound
    )


def brute_force_erm(x: ArrayLike, y: ArrayLike, K: int, bound: float) -> ErmFit:
    """Exact ERM for one-dimensional covariates by enumerating interval splits.

    On the real line every affine argmax partition is a sequence of intervals,
    and any interval labelling can be realised, so enumerating up to K - 1
    breakpoints between distinct covariate values covers the hypothesis class
    up to relabelling.
    """
    covariates, responses = _check_data(x, y, K)
    if covariates.shape[1] != 1:
        raise DimensionError("brute force needs one-dimensional covariates")
    n = covariates.shape[0]
    if n > BRUTE_FORCE_MAX_POINTS or K > BRUTE_FORCE_MAX_MODES:
        raise ValueError(
            f"brute force is limited to n <= {BRUTE_FORCE_MAX_POINTS}, "
            f"K <= {BRUTE_FORCE_MAX_MODES}"
        )
    x_lift = lift(covariates)
    values = np.unique(covariates[:, 0])
    midpoints = (values[:-1] + values[1:]) / 2.0
    m = responses.shape[1]
    zero = AffineMap(matrix=np.zeros((m, 2)), frobenius_bound=bound)

    best: ErmFit | None = None
    for count in range(min(K - 1, len(midpoints)) + 1):
        for breaks in combinations(midpoints.tolist(), count):
            classifier = _interval_classifier(list(breaks), K)
            labels = classifier.predict(covariates)
            maps = _fit_maps(x_lift, responses, labels, [zero] * K, bound)
            value = objective_value(maps, labels, x_lift, responses)
            if best is None or value < best.objective - 1e-12:
                best = ErmFit(
                    maps=maps,
                    classifier=classifier,
                    label_map=np.arange(K),
                    objective=value,
                )
    assert best is not None
    return best
