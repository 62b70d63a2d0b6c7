"""Tests for the offline ERM oracles."""

import numpy as np
import pytest

from src.pwa.core import lift, make_rng
from src.pwa.erm import (
    ErmSettings,
    brute_force_erm,
    fit_classifier,
    fit_heuristic,
    initial_partitions,
    least_squares_mode,
    objective_value,
)
from src.pwa.errors import DimensionError, InsufficientDataError


def two_lines(n: int, seed: int = 0, noise: float = 0.0):
    """y = x left of zero and y = 1 right of it."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, size=(n, 1))
    y = np.where(x < 0.0, x, 1.0) + noise * rng.standard_normal((n, 1))
    return x, y


class TestLeastSquares:
    """Tests for the per-mode refit."""

    def test_exact_recovery(self):
        """Test that noiseless data gives back the generating map."""
        x = np.random.default_rng(0).normal(size=(30, 2))
        theta = np.array([[1.0, -2.0, 0.5]])
        fitted = least_squares_mode(lift(x), lift(x) @ theta.T)
        np.testing.assert_allclose(fitted.matrix, theta, atol=1e-8)

    def test_underdetermined_is_regularised(self):
        """Test that a single point still gives a finite map."""
        fitted = least_squares_mode(lift(np.array([[1.0, 2.0]])), np.array([[3.0]]))
        assert np.all(np.isfinite(fitted.matrix))

    def test_projection(self):
        """Test that the refit respects the Frobenius bound."""
        x = np.linspace(-1.0, 1.0, 20).reshape(-1, 1)
        fitted = least_squares_mode(lift(x), 10.0 * x, bound=2.0)
        assert np.linalg.norm(fitted.matrix) <= 2.0 + 1e-9


class TestClassifierFit:
    """Tests for the hinge fit of a labelling."""

    @pytest.mark.parametrize("solver", ["subgradient", "lp"])
    def test_separable_labels(self, solver):
        """Test that an interval labelling is reproduced exactly."""
        x = np.linspace(-1.0, 1.0, 11).reshape(-1, 1)
        labels = (x[:, 0] > 0.1).astype(np.int64)
        settings = ErmSettings(solver=solver, classifier_steps=500)
        weights = fit_classifier(lift(x), labels, 2, settings)
        predicted = np.argmax(lift(x) @ weights.T, axis=1)
        np.testing.assert_array_equal(predicted, labels)
        assert np.all(np.linalg.norm(weights, axis=1) <= 1.0 + 1e-9)

    def test_single_mode(self):
        """Test that one mode needs no classifier."""
        labels = np.zeros(3, dtype=np.int64)
        weights = fit_classifier(lift(np.ones((3, 2))), labels, 1, ErmSettings())
        assert weights.shape == (1, 3)


class TestHeuristic:
    """Tests for the alternating oracle."""

    def test_restart_kinds(self):
        """Test the fixed order of the initial partitions."""
        x, y = two_lines(20)
        partitions = initial_partitions(lift(x), y, 2, 5, make_rng(0))
        kinds = [kind for kind, _ in partitions]
        assert kinds == ["kmeans", "split", "split", "random", "split"]
        warm = np.zeros(20, dtype=np.int64)
        partitions = initial_partitions(lift(x), y, 2, 2, make_rng(0), warm)
        kinds = [kind for kind, _ in partitions]
        assert kinds == ["warm", "kmeans"]

    def test_trace_is_non_increasing(self):
        """Test that accepted iterates never raise the objective."""
        x, y = two_lines(200, noise=0.05)
        fit = fit_heuristic(x, y, 2, np.inf, ErmSettings(), make_rng(1))
        trace = fit.objective_trace
        assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))

    def test_objective_matches_labels(self):
        """Test that the reported objective belongs to the reported fit."""
        x, y = two_lines(100, noise=0.05)
        fit = fit_heuristic(x, y, 2, np.inf, ErmSettings(), make_rng(2))
        value = objective_value(fit.maps, fit.predict(x), lift(x), y)
        assert fit.objective == pytest.approx(value)

    def test_noise_floor_estimate(self):
        """Test the suboptimality estimate against the noise energy."""
        x, y = two_lines(50)
        fit = fit_heuristic(
            x, y, 2, np.inf, ErmSettings(), make_rng(3), noise_floor=0.0
        )
        assert fit.eps_orac_estimate == pytest.approx(fit.objective)

    def test_matches_brute_force(self):
        """Test that the heuristic reaches the exhaustive optimum on clean data."""
        for seed in range(5):
            x, y = two_lines(16, seed=seed)
            exact = brute_force_erm(x, y, 2, np.inf)
            settings = ErmSettings(restarts=16, solver="lp")
            heuristic = fit_heuristic(x, y, 2, np.inf, settings, make_rng(seed))
            assert exact.objective == pytest.approx(0.0, abs=1e-12)
            assert heuristic.objective <= exact.objective + 1e-6

    def test_empty_data(self):
        """Test that an empty data set is refused."""
        empty = np.zeros((0, 1))
        with pytest.raises(InsufficientDataError):
            fit_heuristic(empty, empty, 2, np.inf, ErmSettings(), make_rng(0))

    def test_more_modes_than_points(self):
        """Test that K above the number of points is refused."""
        x, y = np.array([[0.0], [1.0]]), np.array([[0.0], [1.0]])
        with pytest.raises(InsufficientDataError):
            fit_heuristic(x, y, 3, np.inf, ErmSettings(), make_rng(0))
        with pytest.raises(InsufficientDataError):
            brute_force_erm(x, y, 3, np.inf)

    def test_length_mismatch(self):
        """Test that x and y must have the same length."""
        x, y = np.zeros((3, 1)), np.zeros((2, 1))
        with pytest.raises(DimensionError):
            fit_heuristic(x, y, 2, np.inf, ErmSettings(), make_rng(0))


class TestBruteForce:
    """Tests for the exhaustive one-dimensional oracle."""

    def test_interval_labels(self):
        """Test that the best fit splits at the kink."""
        x, y = two_lines(12, seed=4)
        fit = brute_force_erm(x, y, 2, np.inf)
        labels = fit.predict(x)
        assert len(set(labels[x[:, 0] < 0])) == 1
        assert len(set(labels[x[:, 0] > 0])) == 1

    def test_three_modes_never_worse(self):
        """Test that an extra mode cannot raise the optimum."""
        x, y = two_lines(10, seed=5, noise=0.1)
        assert brute_force_erm(x, y, 3, np.inf).objective <= (
            brute_force_erm(x, y, 2, np.inf).objective + 1e-12
        )

    def test_limits(self):
        """Test the dimension and size limits."""
        with pytest.raises(DimensionError):
            brute_force_erm(np.zeros((4, 2)), np.zeros((4, 1)), 2, np.inf)
        with pytest.raises(ValueError):
            brute_force_erm(np.zeros((30, 1)), np.zeros((30, 1)), 2, np.inf)
