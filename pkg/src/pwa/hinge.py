"""Multi-class hinge loss and projected online gradient descent.

Weights are K rows acting on lifted covariates. The feasible set is the K-fold
product of unit balls; projection rescales each row independently.
"""

import numpy as np
from numpy.typing import ArrayLike
from pydantic import BaseModel, ConfigDict, field_validator

from src.pwa.core import AffineClassifier, FloatArray, IntArray, as_float_array


def project_weights(weights: ArrayLike) -> FloatArray:
    """Euclidean projection onto the product of unit balls."""
    array = np.array(weights, dtype=np.float64)
    norms = np.linalg.norm(array, axis=1)
    over = norms > 1.0
    array[over] /= norms[over, None]
    return array


class OgdWeights(BaseModel):
    """Online classifier weights ``w_1..w_K`` with every row of norm <= 1."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    weights: np.ndarray

    @field_validator("weights", mode="before")
    @classmethod
    def _feasible(cls, value: ArrayLike) -> FloatArray:
        array = as_float_array(value, 2)
        if np.any(np.linalg.norm(array, axis=1) > 1.0 + 1e-12):
            raise ValueError("weight rows must have norm <= 1")
        return array

    @classmethod
    def zeros(cls, K: int, dim: int) -> "OgdWeights":
        return cls(weights=np.zeros((K, dim)))

    @property
    def K(self) -> int:  # noqa: N802
        return int(self.weights.shape[0])

    def predict(self, x_lift: ArrayLike) -> IntArray:
        """Argmax mode of lifted covariates, ties to the lowest index."""
        scores = np.atleast_2d(np.asarray(x_lift, dtype=np.float64)) @ self.weights.T
        return np.argmax(scores, axis=1).astype(np.int64)

    def as_classifier(self) -> AffineClassifier:
        return AffineClassifier.from_lifted(self.weights)


def _check_label(label: int, K: int) -> None:
    if not 0 <= label < K:
        raise ValueError(f"label {label} outside [0, {K})")


def _competitor_margins(
    weights: FloatArray, x: FloatArray, label: int, gamma: float
) -> FloatArray:
    """``1 - <w_label - w_j, x> / gamma`` for every j, -inf at j = label."""
    scores = weights @ x
    margins = 1.0 - (scores[label] - scores) / gamma
    margins[label] = -np.inf
    return margins


def hinge_loss(
    weights: ArrayLike, x_lift: ArrayLike, label: int, gamma: float
) -> float:
    """``max(0, max_{j != label} 1 - <w_label - w_j, x> / gamma)``."""
    w = np.asarray(weights, dtype=np.float64)
    _check_label(label, w.shape[0])
    if w.shape[0] == 1:
        return 0.0
    margins = _competitor_margins(w, np.asarray(x_lift, dtype=np.float64), label, gamma)
    return float(max(0.0, margins.max()))


def hinge_subgradient(
    weights: ArrayLike, x_lift: ArrayLike, label: int, gamma: float
) -> FloatArray:
    """A subgradient of `hinge_loss` with respect to the weights.

    Zero on the flat region; otherwise ``-x / gamma`` on the label row and
    ``+x / gamma`` on the first maximising competitor.
    """
    w = np.asarray(weights, dtype=np.float64)
    x = np.asarray(x_lift, dtype=np.float64)
    _check_label(label, w.shape[0])
    grad = np.zeros_like(w)
    if w.shape[0] == 1:
        return grad
    margins = _competitor_margins(w, x, label, gamma)
    rival = int(np.argmax(margins))
    if margins[rival] <= 0.0:
        return grad
    grad[label] = -x / gamma
    grad[rival] = x / gamma
    return grad


def hinge_losses(
    weights: FloatArray, x_lift: FloatArray, labels: IntArray, gamma: float
) -> FloatArray:
    """Vectorised `hinge_loss` over the rows of a batch."""
    n = x_lift.shape[0]
    if weights.shape[0] == 1:
        return np.zeros(n)
    scores = x_lift @ weights.T
    own = scores[np.arange(n), labels]
    margins = 1.0 - (own[:, None] - scores) / gamma
    margins[np.arange(n), labels] = -np.inf
    return np.maximum(0.0, margins.max(axis=1))


def mean_hinge_subgradient(
    weights: FloatArray, x_lift: FloatArray, labels: IntArray, gamma: float
) -> FloatArray:
    """Subgradient of the average hinge loss over a batch."""
    n, K = x_lift.shape[0], weights.shape[0]
    grad = np.zeros_like(weights)
    if K == 1 or n == 0:
        return grad
    scores = x_lift @ weights.T
    own = scores[np.arange(n), labels]
    margins = 1.0 - (own[:, None] - scores) / gamma
    margins[np.arange(n), labels] = -np.inf
    rivals = np.argmax(margins, axis=1)
    active = margins[np.arange(n), rivals] > 0.0
    if not np.any(active):
        return grad
    xa = x_lift[active] / (gamma * n)
    np.add.at(grad, labels[active], -xa)
    np.add.at(grad, rivals[active], xa)
    return grad


def ogd_epoch(
    weights: OgdWeights,
    x_lift: ArrayLike,
    labels: ArrayLike,
    gamma: float,
    eta: float,
) -> OgdWeights:
    """One pass of projected OGD over a batch, in time order."""
    w = weights.weights.copy()
    batch = np.atleast_2d(np.asarray(x_lift, dtype=np.float64))
    targets = np.asarray(labels, dtype=np.int64)
    if eta == 0.0:
        return weights
    for x, label in zip(batch, targets, strict=True):
        grad = hinge_subgradient(w, x, int(label), gamma)
        if grad.any():
            w = project_weights(w - eta * grad)
    return OgdWeights(weights=w)


def ambiguous(weights: ArrayLike, x: ArrayLike, gamma: float) -> bool:
    """Whether some pair of scores lies within gamma of each other."""
    scores = np.asarray(weights, dtype=np.float64) @ np.asarray(x, dtype=np.float64)
    gaps = np.abs(scores[:, None] - scores[None, :])
    np.fill_diagonal(gaps, np.inf)
    return bool(np.any(gaps <= gamma))


def soft_margin_bound(
    weights: ArrayLike, x: ArrayLike, label: int, gamma: float
) -> float:
    """Right-hand side of the hinge-versus-indicator domination.

    ``1[x ambiguous] + (1 + 2 ||x|| / gamma) * 1[argmax(w, x) != label]``;
    for covariates of norm at most one the second factor is ``1 + 2 / gamma``.
    """
    w = np.asarray(weights, dtype=np.float64)
    vec = np.asarray(x, dtype=np.float64)
    wrong = int(np.argmax(w @ vec)) != label
    scale = 1.0 + 2.0 * max(1.0, float(np.linalg.norm(vec))) / gamma
    return float(ambiguous(w, vec, gamma)) + scale * float(wrong)
