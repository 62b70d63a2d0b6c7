"""Tests for the multi-class hinge loss and projected OGD."""

import numpy as np
import pytest

from src.pwa.core import make_rng
from src.pwa.hinge import (
    OgdWeights,
    ambiguous,
    hinge_loss,
    hinge_losses,
    hinge_subgradient,
    mean_hinge_subgradient,
    ogd_epoch,
    project_weights,
    soft_margin_bound,
)


def random_case(rng, K, dim):
    """Feasible weights, a covariate, a label and a margin."""
    weights = project_weights(rng.normal(size=(K, dim)))
    x = rng.normal(size=dim) * rng.uniform(0.1, 3.0)
    label = int(rng.integers(K))
    gamma = float(rng.uniform(0.05, 2.0))
    return weights, x, label, gamma


class TestHingeLoss:
    """Tests for the loss and its relation to the 0/1 indicator."""

    def test_single_mode_is_zero(self):
        """Test that one mode never pays."""
        assert hinge_loss(np.ones((1, 2)) * 0.5, [1.0, 1.0], 0, 0.1) == 0.0

    def test_known_values(self):
        """Test a hand-computed case."""
        weights = np.array([[1.0, 0.0], [0.0, 0.0]])
        x = np.array([0.5, 1.0])
        assert hinge_loss(weights, x, 0, 1.0) == pytest.approx(0.5)
        assert hinge_loss(weights, x, 1, 1.0) == pytest.approx(1.5)
        assert hinge_loss(weights, x, 0, 0.25) == 0.0

    def test_bad_label(self):
        """Test that labels outside the mode range are rejected."""
        with pytest.raises(ValueError):
            hinge_loss(np.zeros((2, 2)), [1.0, 1.0], 2, 1.0)

    def test_fuzz_dominations(self):
        """Test indicator <= loss <= soft-margin bound on random cases."""
        rng = make_rng(0)
        for _ in range(5000):
            K = int(rng.integers(2, 5))
            weights, x, label, gamma = random_case(rng, K, int(rng.integers(1, 4)))
            loss = hinge_loss(weights, x, label, gamma)
            wrong = int(np.argmax(weights @ x)) != label
            assert loss >= float(wrong) - 1e-12
            assert loss >= 0.0
            assert loss <= soft_margin_bound(weights, x, label, gamma) + 1e-9

    def test_vectorised_matches_scalar(self):
        """Test that the batch loss matches the per-row loss."""
        rng = make_rng(1)
        weights = project_weights(rng.normal(size=(3, 2)))
        x = rng.normal(size=(40, 2))
        labels = rng.integers(3, size=40)
        batch = hinge_losses(weights, x, labels, 0.3)
        single = [hinge_loss(weights, row, int(y), 0.3) for row, y in zip(x, labels)]
        np.testing.assert_allclose(batch, single)


class TestSubgradient:
    """Tests for the hinge subgradient."""

    def test_matches_finite_differences(self):
        """Test directional derivatives away from kinks."""
        rng = make_rng(2)
        checked = 0
        for _ in range(3000):
            K = int(rng.integers(2, 5))
            weights, x, label, gamma = random_case(rng, K, 2)
            scores = weights @ x
            margins = 1.0 - (scores[label] - scores) / gamma
            margins[label] = -np.inf
            top = np.sort(margins)[::-1]
            if abs(top[0]) < 1e-2 or (K > 2 and top[0] - top[1] < 1e-2):
                continue
            direction = rng.normal(size=weights.shape)
            h = 1e-6
            numeric = (
                hinge_loss(weights + h * direction, x, label, gamma)
                - hinge_loss(weights - h * direction, x, label, gamma)
            ) / (2 * h)
            grad = hinge_subgradient(weights, x, label, gamma)
            analytic = float(np.sum(grad * direction))
            assert numeric == pytest.approx(analytic, abs=1e-4)
            checked += 1
        assert checked > 1000

    def test_norm_bound(self):
        """Test that the subgradient norm is at most sqrt(2) ||x|| / gamma."""
        rng = make_rng(3)
        for _ in range(2000):
            weights, x, label, gamma = random_case(rng, 3, 3)
            grad = hinge_subgradient(weights, x, label, gamma)
            bound = np.sqrt(2.0) * np.linalg.norm(x) / gamma
            assert np.linalg.norm(grad) <= bound + 1e-9

    def test_zero_on_flat_region(self):
        """Test that a confident correct prediction has zero subgradient."""
        weights = np.array([[1.0, 0.0], [0.0, 0.0]])
        assert not hinge_subgradient(weights, [1.0, 1.0], 0, 0.5).any()

    def test_mean_matches_average(self):
        """Test the batch subgradient against the mean of single ones."""
        rng = make_rng(4)
        weights = project_weights(rng.normal(size=(3, 3)))
        x = rng.normal(size=(25, 3))
        labels = rng.integers(3, size=25)
        expected = np.mean(
            [hinge_subgradient(weights, row, int(y), 0.4) for row, y in zip(x, labels)],
            axis=0,
        )
        np.testing.assert_allclose(
            mean_hinge_subgradient(weights, x, labels, 0.4), expected, atol=1e-12
        )


class TestOgd:
    """Tests for projected online gradient descent."""

    def test_weights_stay_feasible(self):
        """Test that every update stays in the product of unit balls."""
        rng = make_rng(5)
        weights = OgdWeights.zeros(3, 2)
        x = rng.normal(size=(200, 2)) * 5.0
        labels = rng.integers(3, size=200)
        updated = ogd_epoch(weights, x, labels, gamma=0.1, eta=1.0)
        assert np.all(np.linalg.norm(updated.weights, axis=1) <= 1.0 + 1e-12)

    def test_zero_step_is_identity(self):
        """Test that eta = 0 leaves the weights unchanged."""
        weights = OgdWeights(weights=[[0.5, 0.0], [0.0, 0.5]])
        out = ogd_epoch(weights, [[1.0, 1.0]], [1], gamma=0.1, eta=0.0)
        np.testing.assert_array_equal(out.weights, weights.weights)

    def test_classifier_agrees_with_predict(self):
        """Test that the split classifier labels unlifted points the same way."""
        rng = make_rng(8)
        raw = rng.normal(size=(3, 3))
        weights = OgdWeights(weights=raw / (2.0 * np.linalg.norm(raw, axis=1)[:, None]))
        x = rng.normal(size=(50, 2))
        x_lift = np.hstack([x, np.ones((50, 1))])
        classifier = weights.as_classifier()
        assert classifier.offset_bound == 1.0
        np.testing.assert_array_equal(classifier.predict(x), weights.predict(x_lift))

    def test_infeasible_weights_rejected(self):
        """Test that rows longer than one are refused."""
        with pytest.raises(ValueError):
            OgdWeights(weights=[[2.0, 0.0]])

    def test_regret_bound(self):
        """Test regret against an offline comparator on random sequences."""
        K, T, gamma = 3, 2000, 0.5
        eta = gamma * np.sqrt(4 * K / T)
        bound = 4 * K / eta + eta * T / gamma**2
        rng = make_rng(6)
        for _ in range(10):
            x = rng.normal(size=(T, 3))
            x /= np.linalg.norm(x, axis=1, keepdims=True)
            centers = rng.normal(size=(K, 3))
            labels = np.argmax(x @ centers.T + 0.5 * rng.normal(size=(T, K)), axis=1)

            weights = OgdWeights.zeros(K, 3)
            online = 0.0
            for row, label in zip(x, labels):
                online += hinge_loss(weights.weights, row, int(label), gamma)
                weights = ogd_epoch(weights, row[None, :], [label], gamma, eta)

            comparator = np.zeros((K, 3))
            for k in range(1, 301):
                grad = mean_hinge_subgradient(comparator, x, labels, gamma)
                comparator = project_weights(comparator - grad / np.sqrt(k))
            offline = float(hinge_losses(comparator, x, labels, gamma).sum())
            assert online - offline <= bound


class TestAmbiguity:
    """Tests for the margin ambiguity predicate."""

    def test_close_scores(self):
        """Test that scores within gamma are ambiguous."""
        weights = np.array([[1.0, 0.0], [0.9, 0.0]])
        assert ambiguous(weights, [1.0, 0.0], 0.2)
        assert not ambiguous(weights, [1.0, 0.0], 0.05)
