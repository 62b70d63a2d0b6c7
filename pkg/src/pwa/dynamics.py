"""Piecewise-affine dynamical systems driven by smoothed inputs.

``z' = A_i z + B_i u + m_i + e`` with ``i = g*([z | u])``. The regression
learner is reused for one-step prediction with covariates ``[z | u]`` and
responses ``z'``.
"""

from collections.abc import Callable
from dataclasses import dataclass
import logging
from typing import Any, Literal

import numpy as np
from numpy.typing import ArrayLike
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.linalg import eigh, svd

from src.pwa.core import TOL, AffineClassifier, AffineMap, FloatArray, IntArray
from src.pwa.erm import ErmSettings
from src.pwa.errors import DimensionError, LyapunovError, PwaError
from src.pwa.learner import HingeConfig, MapTransform, run
from src.pwa.metrics import GroundTruth, RunReport
from src.pwa.smoothing import NoiseChannel, concatenated_smoothness_bound

logger = logging.getLogger(__name__)

ProjectionMethod = Literal["whitened", "sdp"]

# Slack allowed in A^T P A <= P.
CONE_SLACK = 1e-9


def truncate_rows(values: FloatArray, bound: float) -> FloatArray:
    """Radially clip every row to Euclidean norm `bound`."""
    if not np.isfinite(bound):
        return values
    norms = np.linalg.norm(values, axis=-1, keepdims=True)
    scale = np.minimum(1.0, bound / np.maximum(norms, np.finfo(float).tiny))
    return values * scale


def _check_spd(P: FloatArray) -> FloatArray:
    """Eigenvalues of a symmetric positive definite matrix, or LyapunovError."""
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise LyapunovError(f"P must be square, got shape {P.shape}")
    if not np.allclose(P, P.T, atol=1e-12):
        raise LyapunovError("P must be symmetric")
    eigenvalues = eigh(P, eigvals_only=True)
    if eigenvalues[0] <= 0.0:
        raise LyapunovError(
            f"P must be positive definite, min eigenvalue {eigenvalues[0]:.3g}"
        )
    return eigenvalues


def cone_violation(A: ArrayLike, P: ArrayLike) -> float:
    """Largest eigenvalue of ``A^T P A - P`` (<= 0 inside the cone)."""
    a = np.asarray(A, dtype=np.float64)
    p = np.asarray(P, dtype=np.float64)
    gap = a.T @ p @ a - p
    return float(eigh((gap + gap.T) / 2.0, eigvals_only=True)[-1])


class PwaDynamics(BaseModel):
    """Per-mode ``(A_i, B_i, m_i)``, a classifier on ``[z | u]`` and process noise."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    state_matrices: list[np.ndarray]
    input_matrices: list[np.ndarray]
    offsets: list[np.ndarray]
    classifier: AffineClassifier
    noise: NoiseChannel
    noise_bound: float = Field(default=np.inf, gt=0.0)
    lyapunov: np.ndarray | None = None

    @field_validator("state_matrices", "input_matrices", mode="before")
    @classmethod
    def _matrices(cls, value: list[ArrayLike]) -> list[FloatArray]:
        return [np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in value]

    @field_validator("offsets", mode="before")
    @classmethod
    def _vectors(cls, value: list[ArrayLike]) -> list[FloatArray]:
        return [np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in value]

    @field_validator("lyapunov", mode="before")
    @classmethod
    def _lyapunov(cls, value: ArrayLike | None) -> FloatArray | None:
        return None if value is None else np.asarray(value, dtype=np.float64)

    @model_validator(mode="after")
    def _check(self) -> "PwaDynamics":
        K = len(self.state_matrices)
        if not K == len(self.input_matrices) == len(self.offsets) == self.classifier.K:
            raise DimensionError("every mode needs A, B, m and a classifier score")
        dz, du = self.state_dim, self.input_dim
        for A, B, m in zip(
            self.state_matrices, self.input_matrices, self.offsets, strict=True
        ):
            if A.shape != (dz, dz) or B.shape != (dz, du) or m.shape != (dz,):
                raise DimensionError("inconsistent block shapes across modes")
        if self.classifier.d != dz + du:
            raise DimensionError("the classifier acts on [z | u]")
        if self.noise.dimension != dz:
            raise DimensionError("process noise must live in the state space")
        if self.lyapunov is not None:
            _check_spd(self.lyapunov)
            for i, A in enumerate(self.state_matrices):
                if cone_violation(A, self.lyapunov) > CONE_SLACK:
                    raise LyapunovError(f"mode {i} violates A^T P A <= P")
        return self

    @property
    def K(self) -> int:  # noqa: N802
        return len(self.state_matrices)

    @property
    def state_dim(self) -> int:
        return int(self.state_matrices[0].shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.input_matrices[0].shape[1])

    def maps(self, bound: float = np.inf) -> list[AffineMap]:
        """``[A_i | B_i | m_i]`` acting on ``[z | u | 1]``."""
        return [
            AffineMap(matrix=np.hstack([A, B, m[:, None]]), frobenius_bound=bound)
            for A, B, m in zip(
                self.state_matrices, self.input_matrices, self.offsets, strict=True
            )
        ]

    def truth(self) -> GroundTruth:
        return GroundTruth(maps=self.maps(), classifier=self.classifier)

    def sample_noise(self, rng: np.random.Generator, n: int) -> FloatArray:
        return truncate_rows(self.noise.sample(rng, n), self.noise_bound)


def step_batch(
    dyn: PwaDynamics, z: FloatArray, u: FloatArray, noise: FloatArray
) -> tuple[FloatArray, IntArray]:
    """Advance a batch of states with given noise; returns next states and modes."""
    modes = dyn.classifier.predict(np.hstack([z, u]))
    A = np.stack(dyn.state_matrices)[modes]
    B = np.stack(dyn.input_matrices)[modes]
    m = np.stack(dyn.offsets)[modes]
    nxt = (
        np.einsum("nij,nj->ni", A, z) + np.einsum("nij,nj->ni", B, u) + m + noise
    )
    return nxt, modes


def step(
    dyn: PwaDynamics, z: ArrayLike, u: ArrayLike, rng: np.random.Generator
) -> tuple[FloatArray, int]:
    """One transition from a single state; noise is drawn and truncated."""
    state = np.asarray(z, dtype=np.float64).reshape(1, -1)
    control = np.asarray(u, dtype=np.float64).reshape(1, -1)
    if state.shape[1] != dyn.state_dim or control.shape[1] != dyn.input_dim:
        raise DimensionError("state or input has the wrong dimension")
    nxt, modes = step_batch(dyn, state, control, dyn.sample_noise(rng, 1))
    return nxt[0], int(modes[0])


class OpenLoopPolicy(BaseModel):
    """State-independent episode inputs ``u_h = nominal_h + exploration``."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    input_dim: int = Field(..., ge=1)
    exploration: NoiseChannel
    nominal: np.ndarray | None = Field(default=None, description="H x d_u.")

    @model_validator(mode="after")
    def _check(self) -> "OpenLoopPolicy":
        if self.exploration.dimension != self.input_dim:
            raise DimensionError("exploration noise must live in the input space")
        return self

    def sample(self, H: int, rng: np.random.Generator, n: int = 1) -> FloatArray:
        """Input sequences of shape ``(n, H, d_u)``."""
        draws = self.exploration.sample(rng, n * H).reshape(n, H, self.input_dim)
        if self.nominal is not None:
            draws = draws + np.asarray(self.nominal, dtype=np.float64)[:H]
        return draws


GainSchedule = Callable[[int], ArrayLike]


class FeedbackPolicy(BaseModel):
    """``u_t = K_t z_t + nominal + exploration`` with a gain fixed before round t."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    gain: np.ndarray = Field(..., description="d_u x d_z.")
    nominal: np.ndarray
    exploration: NoiseChannel
    schedule: GainSchedule | None = Field(default=None, exclude=True)

    @field_validator("gain", mode="before")
    @classmethod
    def _gain(cls, value: ArrayLike) -> FloatArray:
        return np.atleast_2d(np.asarray(value, dtype=np.float64))

    @field_validator("nominal", mode="before")
    @classmethod
    def _nominal(cls, value: ArrayLike) -> FloatArray:
        return np.atleast_1d(np.asarray(value, dtype=np.float64))

    @model_validator(mode="after")
    def _check(self) -> "FeedbackPolicy":
        if self.nominal.shape != (self.gain.shape[0],):
            raise DimensionError("nominal input must match the gain rows")
        if self.exploration.dimension != self.gain.shape[0]:
            raise DimensionError("exploration noise must live in the input space")
        return self

    @classmethod
    def exploring(
        cls, input_dim: int, state_dim: int, exploration: NoiseChannel
    ) -> "FeedbackPolicy":
        """Pure exploration: zero gain and zero nominal input."""
        return cls(
            gain=np.zeros((input_dim, state_dim)),
            nominal=np.zeros(input_dim),
            exploration=exploration,
        )

    def gain_at(self, t: int) -> FloatArray:
        if self.schedule is None:
            return self.gain
        return np.atleast_2d(np.asarray(self.schedule(t), dtype=np.float64))

    def max_gain_norm(self, T: int) -> float:
        if self.schedule is None:
            return float(np.linalg.norm(self.gain, ord=2))
        return max(float(np.linalg.norm(self.gain_at(t), ord=2)) for t in range(T))

    def __call__(self, z: ArrayLike, t: int, rng: np.random.Generator) -> FloatArray:
        state = np.asarray(z, dtype=np.float64)
        noise = self.exploration.sample(rng, 1)[0]
        return self.gain_at(t) @ state + self.nominal + noise


@dataclass
class Trajectory:
    """States ``z_1..z_{H+1}``, inputs ``u_1..u_H`` and modes of one rollout."""

    episode: int
    states: FloatArray
    inputs: FloatArray
    modes: IntArray

    def __post_init__(self) -> None:
        H = self.inputs.shape[0]
        if self.states.shape[0] != H + 1 or self.modes.shape[0] != H:
            raise DimensionError("a trajectory of H inputs needs H + 1 states")

    def to_frame(self) -> pd.DataFrame:
        """One row per step: episode, h, z..., u..., mode."""
        H = self.inputs.shape[0]
        frame = pd.DataFrame({"episode": self.episode, "h": np.arange(1, H + 1)})
        for k in range(self.states.shape[1]):
            frame[f"z{k}"] = self.states[:H, k]
        for k in range(self.inputs.shape[1]):
            frame[f"u{k}"] = self.inputs[:, k]
        frame["mode"] = self.modes
        return frame


def closed_loop(
    dyn: PwaDynamics,
    policy: FeedbackPolicy,
    T: int,
    rng: np.random.Generator,
    initial: ArrayLike | None = None,
) -> Trajectory:
    """Run the system for T rounds under a feedback policy."""
    dz, du = dyn.state_dim, dyn.input_dim
    states = np.zeros((T + 1, dz))
    inputs = np.zeros((T, du))
    modes = np.zeros(T, dtype=np.int64)
    if initial is not None:
        states[0] = np.asarray(initial, dtype=np.float64)
    for t in range(T):
        inputs[t] = policy(states[t], t, rng)
        states[t + 1], modes[t] = step(dyn, states[t], inputs[t], rng)
    return Trajectory(episode=0, states=states, inputs=inputs, modes=modes)


def one_step_prediction_run(
    dyn: PwaDynamics,
    policy: FeedbackPolicy,
    T: int,
    config: HingeConfig,
    erm: ErmSettings,
    rng: np.random.Generator,
    bound: float = np.inf,
    seed: int = 0,
    echo: dict[str, Any] | None = None,
    sink: Callable[[Trajectory], None] | None = None,
) -> RunReport:
    """Predict ``z_{t+1}`` from ``[z_t | u_t]`` with the epoch learner.

    The report's `total_loss` is ``sum ||z_{t+1} - z_hat||^2``, its
    `noise_floor` the realised noise energy and its regret the excess over
    the true next-state mean.
    `sink`, when given, receives the closed-loop trajectory.
    """
    data_rng, learner_rng = rng.spawn(2)
    trajectory = closed_loop(dyn, policy, T, data_rng)
    if sink is not None:
        sink(trajectory)
    covariates = np.hstack([trajectory.states[:-1], trajectory.inputs])
    responses = trajectory.states[1:]
    report = run(
        covariates,
        responses,
        dyn.K,
        bound,
        config,
        erm,
        learner_rng,
        dyn.truth(),
        seed=seed,
        mode="dynamics",
        echo=echo,
    )
    sigma_dir = min(dyn.noise.sigma_dir, policy.exploration.sigma_dir)
    report.extras["covariate_smoothness"] = concatenated_smoothness_bound(
        sigma_dir, policy.max_gain_norm(T)
    )
    report.extras["excess"] = report.total_regret
    return report


def _project_whitened(A: FloatArray, P: FloatArray) -> FloatArray:
    eigenvalues, vectors = eigh(P)
    root = vectors @ np.diag(np.sqrt(eigenvalues)) @ vectors.T
    root_inv = vectors @ np.diag(1.0 / np.sqrt(eigenvalues)) @ vectors.T
    left, singular, right = svd(root @ A @ root_inv)
    if singular[0] <= 1.0 + 1e-12:
        return A
    clipped = left @ np.diag(np.minimum(singular, 1.0)) @ right
    return root_inv @ clipped @ root


def _project_sdp(A: FloatArray, P: FloatArray) -> FloatArray:
    """Plain Frobenius projection through the Schur-complement LMI."""
    try:
        import cvxpy as cp
    except ImportError as e:
        raise PwaError("the sdp projection needs the optional cvxpy dependency") from e
    n = A.shape[0]
    X = cp.Variable((n, n))
    S = cp.Variable((2 * n, 2 * n), PSD=True)
    block = cp.bmat([[P, X.T @ P], [P @ X, P]])
    problem = cp.Problem(cp.Minimize(cp.sum_squares(X - A)), [S == block])
    problem.solve()
    if X.value is None:
        raise LyapunovError(f"cone projection solver ended with {problem.status}")
    # Solver output is feasible only up to its tolerance.
    return _project_whitened(np.asarray(X.value), P)


def project_to_lyapunov_cone(
    theta: AffineMap, P: ArrayLike, method: ProjectionMethod = "whitened"
) -> AffineMap:
    """Project the A-block of ``[A | B | m]`` so that ``A^T P A <= P``.

    `whitened` clips the singular values of ``P^(1/2) A P^(-1/2)`` at one,
    which is the exact projection in the P-weighted norm; `sdp` solves the
    plain Frobenius problem with cvxpy. B and m pass through unchanged unless
    the result leaves the Frobenius ball, in which case the whole map is
    rescaled onto it.
    """
    weight = np.asarray(P, dtype=np.float64)
    _check_spd(weight)
    dz = weight.shape[0]
    if theta.m != dz or theta.matrix.shape[1] < dz:
        raise DimensionError("P does not match the map's state block")
    A = theta.matrix[:, :dz]
    if method == "whitened":
        projected = _project_whitened(A, weight)
    else:
        projected = _project_sdp(A, weight)
    if projected is A:
        return theta
    matrix = theta.matrix.copy()
    matrix[:, :dz] = projected
    norm = float(np.linalg.norm(matrix))
    if norm > theta.frobenius_bound + TOL:
        # Shrinking A keeps it inside the cone.
        logger.warning(
            f"Cone projection left the Frobenius ball ({norm:.4g} > "
            f"{theta.frobenius_bound:.4g}); rescaling"
        )
    return AffineMap.projected(matrix, theta.frobenius_bound)


def cone_transform(
    P: ArrayLike, method: ProjectionMethod = "whitened"
) -> MapTransform:
    """Map transform projecting every fitted mode onto the cone of P."""

    def transform(maps: list[AffineMap]) -> list[AffineMap]:
        return [project_to_lyapunov_cone(theta, P, method) for theta in maps]

    return transform
