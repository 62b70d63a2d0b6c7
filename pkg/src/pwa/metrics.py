"""Ground-truth evaluation: matchings, covariance spectra, regret reports."""

from datetime import UTC, datetime
import hashlib
import json
import logging
import math
from typing import Any

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import linear_sum_assignment

from src.pwa.core import AffineClassifier, AffineMap, FloatArray, IntArray
from src.pwa.errors import InsufficientDataError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class GroundTruth(BaseModel):
    """The hidden parameters of an instance, visible to the evaluator only."""

    model_config = ConfigDict(frozen=True)

    maps: list[AffineMap]
    classifier: AffineClassifier

    @property
    def K(self) -> int:  # noqa: N802
        return len(self.maps)

    def modes(self, x_lift: FloatArray) -> IntArray:
        return self.classifier.predict(np.atleast_2d(x_lift)[:, :-1])

    def means(self, x_lift: FloatArray, modes: IntArray | None = None) -> FloatArray:
        """``Theta*_{g*(x)} x_lift`` for every row."""
        batch = np.atleast_2d(x_lift)
        labels = self.modes(batch) if modes is None else modes
        stacked = np.stack([m.matrix for m in self.maps])
        return np.einsum("nij,nj->ni", stacked[labels], batch)


class Matching(BaseModel):
    """Nearest and optimal assignments of estimated to true modes.

    `nearest` may send two estimates to one true mode; `assignment` is a
    bijection.
    """

    model_config = ConfigDict(frozen=True)

    nearest: list[int]
    assignment: list[int]
    nearest_cost: float
    assignment_cost: float


def _distances(estimated: list[AffineMap], true: list[AffineMap]) -> FloatArray:
    return np.array([[e.distance(t) for t in true] for e in estimated])


def match_permutation(estimated: list[AffineMap], true: list[AffineMap]) -> Matching:
    """Match estimated modes to true modes by Frobenius distance.

    Each estimated mode goes to its nearest true mode, ties to the lowest
    index, repeats allowed. The optimal pass solves the assignment problem on
    squared distances.
    """
    if len(estimated) != len(true):
        raise ValueError("both families need the same number of modes")
    dist = _distances(estimated, true)
    nearest = [int(np.argmin(row)) for row in dist]
    rows, cols = linear_sum_assignment(dist**2)
    assignment = [int(c) for _, c in sorted(zip(rows, cols, strict=True))]
    return Matching(
        nearest=nearest,
        assignment=assignment,
        nearest_cost=float(sum(dist[i, j] ** 2 for i, j in enumerate(nearest))),
        assignment_cost=float(sum(dist[i, j] ** 2 for i, j in enumerate(assignment))),
    )


class PairSpectrum(BaseModel):
    """Extreme eigenvalues of the empirical covariance on one label pair."""

    model_config = ConfigDict(frozen=True)

    estimated: int
    true: int
    count: int
    lambda_min: float
    lambda_max: float


def covariance_spectrum(
    x_lift: FloatArray, estimated: IntArray, true: IntArray, K: int
) -> list[PairSpectrum]:
    """Spectra of ``sum x x^T`` over ``I_ij = {t : g_hat = i, g* = j}``.

    A pair with fewer than ``d + 1`` points reports ``lambda_min = 0``.
    """
    dim = x_lift.shape[1]
    spectra = []
    for i in range(K):
        for j in range(K):
            rows = x_lift[(estimated == i) & (true == j)]
            if rows.shape[0] == 0:
                spectra.append(
                    PairSpectrum(
                        estimated=i, true=j, count=0, lambda_min=0.0, lambda_max=0.0
                    )
                )
                continue
            eig = np.linalg.eigvalsh(rows.T @ rows)
            low = float(max(eig[0], 0.0)) if rows.shape[0] >= dim else 0.0
            spectra.append(
                PairSpectrum(
                    estimated=i,
                    true=j,
                    count=int(rows.shape[0]),
                    lambda_min=low,
                    lambda_max=float(eig[-1]),
                )
            )
    return spectra


def pair_counts(estimated: IntArray, true: IntArray, K: int) -> list[list[int]]:
    counts = np.zeros((K, K), dtype=np.int64)
    np.add.at(counts, (estimated, true), 1)
    return counts.tolist()


class EpochCheckpoint(BaseModel):
    """Diagnostics recorded right after an epoch's fit."""

    epoch: int
    samples: int = Field(..., description="Data points the fit was computed on.")
    objective: float
    restarts: int
    merged: list[tuple[int, int]] = Field(default_factory=list)
    matching: list[int]
    assignment: list[int]
    parameter_errors: list[float] = Field(
        ..., description="Squared Frobenius error of each mode under the matching."
    )
    pair_counts: list[list[int]] = Field(..., description="Fitted label i, true j.")
    spectra: list[PairSpectrum]
    prediction_counts: list[list[int]] = Field(
        default_factory=list, description="Online modes against g* next epoch."
    )


class RunReport(BaseModel):
    """Per-round regret and mistakes plus per-epoch checkpoints."""

    schema_version: int = SCHEMA_VERSION
    mode: str
    seed: int
    config: dict[str, Any] = Field(default_factory=dict)
    regret: list[float] = Field(default_factory=list)
    mistakes: list[int] = Field(default_factory=list)
    epochs: list[int] = Field(default_factory=list)
    noise_floor: float | None = None
    total_loss: float | None = None
    checkpoints: list[EpochCheckpoint] = Field(default_factory=list)
    extras: dict[str, Any] = Field(default_factory=dict)
    created_at: str = Field(default_factory=lambda: datetime.now(UTC).isoformat())

    @property
    def total_regret(self) -> float:
        return float(math.fsum(self.regret))

    @property
    def mistake_rate(self) -> float:
        return float(np.mean(self.mistakes)) if self.mistakes else 0.0

    def cumulative_regret(self) -> FloatArray:
        return np.cumsum(np.asarray(self.regret, dtype=np.float64))

    def has_nan(self) -> bool:
        return bool(np.any(~np.isfinite(np.asarray(self.regret, dtype=np.float64))))

    def to_frame(self) -> pd.DataFrame:
        """One row per round."""
        return pd.DataFrame(
            {
                "t": np.arange(1, len(self.regret) + 1),
                "epoch": self.epochs,
                "regret": self.regret,
                "cumulative_regret": self.cumulative_regret(),
                "mistake": self.mistakes,
            }
        )

    def summary(self) -> dict[str, float]:
        row = {
            "seed": float(self.seed),
            "rounds": float(len(self.regret)),
            "total_regret": self.total_regret,
            "mistake_rate": self.mistake_rate,
            "epochs": float(len(self.checkpoints)),
        }
        if self.noise_floor is not None:
            row["noise_floor"] = self.noise_floor
        if self.total_loss is not None:
            row["total_loss"] = self.total_loss
        for key, value in self.extras.items():
            if isinstance(value, int | float):
                row[key] = float(value)
        return row


def stable_hash(model: BaseModel) -> str:
    """SHA-256 of a report's JSON with the creation timestamp left out."""
    payload = model.model_dump(mode="json", exclude={"created_at"})
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class RecoveryFit(BaseModel):
    """Least-squares line through ``(log |I_ij|, log error^2)``."""

    model_config = ConfigDict(frozen=True)

    slope: float
    intercept: float
    points: int


def fit_recovery_slope(counts: list[float], errors: list[float]) -> RecoveryFit:
    """Log-log slope of squared parameter error against sample count."""
    c = np.asarray(counts, dtype=np.float64)
    e = np.asarray(errors, dtype=np.float64)
    keep = (c > 0) & (e > 0)
    if int(keep.sum()) < 4:
        raise InsufficientDataError("recovery fit needs at least 4 positive points")
    slope, intercept = np.polyfit(np.log(c[keep]), np.log(e[keep]), 1)
    return RecoveryFit(
        slope=float(slope), intercept=float(intercept), points=int(keep.sum())
    )


def recovery_curve(report: RunReport, d: int) -> RecoveryFit:
    """Fit error decay over every epoch and matched pair with enough data.

    A pair enters once its count reaches ``4 (d + 1)``.
    """
    counts: list[float] = []
    errors: list[float] = []
    for checkpoint in report.checkpoints:
        for i, j in enumerate(checkpoint.matching):
            count = checkpoint.pair_counts[i][j]
            if count >= 4 * (d + 1):
                counts.append(float(count))
                errors.append(checkpoint.parameter_errors[i])
    return fit_recovery_slope(counts, errors)


class RegretDecomposition(BaseModel):
    """Regret split by whether the matched mode prediction was right."""

    model_config = ConfigDict(frozen=True)

    mistake_regret: float
    matched_regret: float
    mistakes: int


def regret_decomposition(report: RunReport) -> RegretDecomposition:
    regret = np.asarray(report.regret, dtype=np.float64)
    wrong = np.asarray(report.mistakes, dtype=bool)
    return RegretDecomposition(
        mistake_regret=float(regret[wrong].sum()),
        matched_regret=float(regret[~wrong].sum()),
        mistakes=int(wrong.sum()),
    )


def mistake_accounting(report: RunReport) -> bool:
    """Check per-epoch mistakes against the off-matching prediction counts."""
    epochs = np.asarray(report.epochs)
    mistakes = np.asarray(report.mistakes)
    for checkpoint in report.checkpoints:
        if not checkpoint.prediction_counts:
            continue
        counts = np.asarray(checkpoint.prediction_counts)
        on_match = sum(counts[i, j] for i, j in enumerate(checkpoint.matching))
        expected = int(counts.sum() - on_match)
        observed = int(mistakes[epochs == checkpoint.epoch].sum())
        if expected != observed:
            logger.warning(
                f"Epoch {checkpoint.epoch}: {observed} mistakes, "
                f"{expected} off-matching predictions"
            )
            return False
    return True


def aggregate_reports(rows: list[dict[str, float]]) -> pd.DataFrame:
    """Per-seed summaries plus mean and standard deviation rows."""
    frame = pd.DataFrame(rows)
    if frame.empty:
        return frame
    numeric = frame.drop(columns=["seed"], errors="ignore")
    stats = pd.DataFrame([numeric.mean(), numeric.std(ddof=0)])
    stats.insert(0, "seed", ["mean", "std"])
    if "seed" in frame:
        frame["seed"] = frame["seed"].astype(int).astype(str)
    return pd.concat([frame, stats], ignore_index=True)
