"""Shared domain types and the seeded randomness contract.

Covariates are lifted as ``x_lift = [x | 1]`` so that one matrix of shape
``m x (d + 1)`` carries both the linear part and the offset of an affine map.
Mode indices are 0-based; every argmax in the package resolves ties to the
lowest index.
"""

from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.pwa.errors import DimensionError

FloatArray = NDArray[np.float64]
IntArray = NDArray[np.int64]

# Absolute tolerance for norm invariants.
TOL = 1e-9


def as_float_array(value: ArrayLike, ndim: int) -> FloatArray:
    """Convert to a float64 array with the expected number of dimensions."""
    array = np.asarray(value, dtype=np.float64)
    if array.ndim != ndim:
        raise DimensionError(f"expected a {ndim}-d array, got shape {array.shape}")
    return array


def lift(x: ArrayLike) -> FloatArray:
    """Append the constant 1 to a covariate (or to every row of a batch)."""
    array = np.asarray(x, dtype=np.float64)
    if array.ndim == 1:
        return np.append(array, 1.0)
    return np.hstack([array, np.ones((array.shape[0], 1))])


class Dimensions(BaseModel):
    """Covariate dimension d, response dimension m and number of modes K."""

    model_config = ConfigDict(frozen=True)

    d: int = Field(..., ge=1, description="Covariate dimension.")
    m: int = Field(..., ge=1, description="Response dimension.")
    K: int = Field(..., ge=1, description="Number of modes.")


class AffineMap(BaseModel):
    """One mode's regression parameter, acting on lifted covariates."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    matrix: np.ndarray = Field(..., description="m x (d + 1), offset last.")
    frobenius_bound: float = Field(default=np.inf, ge=0.0)

    @field_validator("matrix", mode="before")
    @classmethod
    def _to_matrix(cls, value: Any) -> FloatArray:
        return as_float_array(value, 2)

    @model_validator(mode="after")
    def _check_bound(self) -> "AffineMap":
        norm = float(np.linalg.norm(self.matrix))
        if norm > self.frobenius_bound + TOL:
            raise ValueError(
                f"Frobenius norm {norm:.6g} exceeds bound {self.frobenius_bound:.6g}"
            )
        return self

    @property
    def m(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def d(self) -> int:
        return int(self.matrix.shape[1]) - 1

    def apply(self, x_lift: ArrayLike) -> FloatArray:
        """Evaluate on one lifted covariate or on a batch of rows."""
        array = np.asarray(x_lift, dtype=np.float64)
        return array @ self.matrix.T

    def distance(self, other: "AffineMap") -> float:
        """Frobenius distance to another map of the same shape."""
        return float(np.linalg.norm(self.matrix - other.matrix))

    def to_dict(self) -> dict[str, Any]:
        return {
            "matrix": self.matrix.tolist(),
            "frobenius_bound": _finite_or_none(self.frobenius_bound),
        }

    @classmethod
    def projected(cls, matrix: ArrayLike, bound: float) -> "AffineMap":
        """Build a map after radial projection onto the Frobenius ball."""
        array = as_float_array(matrix, 2)
        norm = float(np.linalg.norm(array))
        if np.isfinite(bound) and norm > bound:
            array = array * (bound / norm)
        return cls(matrix=array, frobenius_bound=bound)


class AffineClassifier(BaseModel):
    """Argmax of K affine scores ``<w_i, x> + b_i``, ties to the lowest index."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    directions: np.ndarray = Field(..., description="K x d, rows of norm <= 1.")
    offsets: np.ndarray = Field(..., description="K offsets in [-C, C].")
    offset_bound: float = Field(default=np.inf, ge=0.0, description="C.")

    @field_validator("directions", mode="before")
    @classmethod
    def _to_directions(cls, value: Any) -> FloatArray:
        return as_float_array(value, 2)

    @field_validator("offsets", mode="before")
    @classmethod
    def _to_offsets(cls, value: Any) -> FloatArray:
        return as_float_array(value, 1)

    @model_validator(mode="after")
    def _check_invariants(self) -> "AffineClassifier":
        if self.directions.shape[0] != self.offsets.shape[0]:
            raise DimensionError("directions and offsets disagree on K")
        norms = np.linalg.norm(self.directions, axis=1)
        if np.any(norms > 1.0 + 1e-12):
            raise ValueError(f"direction norms must be <= 1, got {norms.max():.6g}")
        if np.any(np.abs(self.offsets) > self.offset_bound + TOL):
            raise ValueError(f"offsets exceed bound {self.offset_bound:.6g}")
        return self

    @property
    def K(self) -> int:  # noqa: N802
        return int(self.directions.shape[0])

    @property
    def d(self) -> int:
        return int(self.directions.shape[1])

    def scores(self, x: ArrayLike) -> FloatArray:
        array = np.asarray(x, dtype=np.float64)
        if array.shape[-1] != self.d:
            raise DimensionError(f"expected covariates of dimension {self.d}")
        return array @ self.directions.T + self.offsets

    def predict(self, x: ArrayLike) -> IntArray:
        """Mode of every row of a batch; np.argmax keeps the first maximum."""
        return np.argmax(self.scores(np.atleast_2d(x)), axis=1).astype(np.int64)

    def to_dict(self) -> dict[str, Any]:
        return {
            "directions": self.directions.tolist(),
            "offsets": self.offsets.tolist(),
            "offset_bound": _finite_or_none(self.offset_bound),
        }

    @classmethod
    def from_lifted(cls, weights: ArrayLike) -> "AffineClassifier":
        """Split K x (d + 1) weights acting on lifted covariates.

        A weight row of norm <= 1 has a direction of norm <= 1 and an offset
        in [-1, 1], so the result is always a member of the class.
        """
        array = as_float_array(weights, 2)
        return cls(directions=array[:, :-1], offsets=array[:, -1], offset_bound=1.0)


def classify(g: AffineClassifier, x: ArrayLike) -> int:
    """Mode of a single covariate."""
    return int(g.predict(np.asarray(x, dtype=np.float64).reshape(1, -1))[0])


class Observation(BaseModel):
    """One emitted round; `hidden_mode` stays on the generator side."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    x: np.ndarray
    x_lift: np.ndarray
    y: np.ndarray
    hidden_mode: int = Field(..., ge=0)
    noise: np.ndarray
    corruption: np.ndarray
    clipped: bool = False

    @model_validator(mode="after")
    def _check_lift(self) -> "Observation":
        if self.x_lift.shape[0] != self.x.shape[0] + 1 or self.x_lift[-1] != 1.0:
            raise DimensionError("x_lift must be x with 1 appended")
        return self


class SeededRng(BaseModel):
    """Seed plus stream id of a PCG64 generator.

    The generator is `numpy.random.PCG64` seeded through a `SeedSequence` whose
    spawn key is the stream id, so every (seed, stream) pair gives the same
    draws on every platform numpy supports.
    """

    model_config = ConfigDict(frozen=True)

    seed: int = Field(..., ge=0, lt=2**64)
    stream: int = Field(default=0, ge=0, lt=2**64)

    def _sequence(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self._sequence()))

    def spawn(self, n: int) -> list[np.random.Generator]:
        """n independent child generators of this stream."""
        return [
            np.random.Generator(np.random.PCG64(child))
            for child in self._sequence().spawn(n)
        ]


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    return SeededRng(seed=seed, stream=stream).generator()


def unit_vectors(rng: np.random.Generator, n: int, dim: int) -> FloatArray:
    """Uniformly distributed directions on the unit sphere."""
    raw = rng.standard_normal((n, dim))
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


def _finite_or_none(value: float) -> float | None:
    return float(value) if np.isfinite(value) else None
