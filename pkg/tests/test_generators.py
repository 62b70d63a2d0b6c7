"""Tests for the data generators."""

from fractions import Fraction

import numpy as np
import pytest

from src.pwa.core import AffineClassifier, AffineMap, classify, make_rng
from src.pwa.errors import DimensionError
from src.pwa.generators import (
    AdversaryState,
    PwaRegressionModel,
    ZPolicy,
    adversarial_threshold_stream,
    emit_observation,
    emit_stream,
    explore_hard_instance,
    hard_identification_instance,
    minimum_gap,
    sample_separated_parameters,
    separation_lower_bound,
    threshold_model,
)
from src.pwa.smoothing import NoiseChannel


@pytest.fixture
def two_mode():
    """Two modes on the line split at zero."""
    return PwaRegressionModel(
        maps=[AffineMap(matrix=[[1.0, 0.0]]), AffineMap(matrix=[[0.0, 1.0]])],
        classifier=AffineClassifier(directions=[[-1.0], [1.0]], offsets=[0.0, 0.0]),
        noise_scale=0.1,
        channel=NoiseChannel.gaussian_for(0.2, 1),
        covariate_bound=3.0,
        separation=1.0,
    )


class TestRegressionModel:
    """Tests for model validation."""

    def test_separation_enforced(self):
        """Test that modes closer than the separation are rejected."""
        with pytest.raises(ValueError):
            PwaRegressionModel(
                maps=[AffineMap(matrix=[[1.0, 0.0]]), AffineMap(matrix=[[1.0, 0.5]])],
                classifier=AffineClassifier(
                    directions=[[-1.0], [1.0]], offsets=[0.0, 0.0]
                ),
                channel=NoiseChannel.gaussian_for(0.2, 1),
                separation=1.0,
            )

    def test_channel_dimension(self):
        """Test that the channel must live in the covariate space."""
        with pytest.raises(ValueError):
            PwaRegressionModel(
                maps=[AffineMap(matrix=[[1.0, 0.0]])],
                classifier=AffineClassifier(directions=[[1.0]], offsets=[0.0]),
                channel=NoiseChannel.gaussian_for(0.2, 2),
            )

    def test_minimum_gap(self, two_mode):
        """Test the smallest pairwise distance."""
        assert minimum_gap(two_mode.maps) == pytest.approx(np.sqrt(2.0))
        assert minimum_gap(two_mode.maps[:1]) == np.inf


class TestEmission:
    """Tests for single observations and streams."""

    def test_observation_consistent(self, two_mode):
        """Test that y follows the map of the hidden mode."""
        obs = emit_observation(two_mode, [0.5], make_rng(0))
        assert obs.x_lift[-1] == 1.0
        assert obs.hidden_mode == classify(two_mode.classifier, obs.x)
        expected = two_mode.maps[obs.hidden_mode].apply(obs.x_lift) + obs.noise
        np.testing.assert_allclose(obs.y, expected)

    def test_observation_shape_checked(self, two_mode):
        """Test that z must match the covariate dimension."""
        with pytest.raises(DimensionError):
            emit_observation(two_mode, [0.5, 0.5], make_rng(0))

    def test_stream(self, two_mode):
        """Test a recorded stream against the hidden truth."""
        stream = emit_stream(two_mode, ZPolicy(), 500, make_rng(1))
        assert stream.T == 500
        predicted = two_mode.classifier.predict(stream.x)
        np.testing.assert_array_equal(stream.modes, predicted)
        means = two_mode.truth().means(stream.x_lift, stream.modes)
        np.testing.assert_allclose(stream.y, means + stream.noise + stream.corruption)
        assert stream.noise_floor() == pytest.approx(float(np.sum(stream.noise**2)))
        assert len(stream.observations()) == 500

    def test_stream_is_reproducible(self, two_mode):
        """Test that the same seed gives the same stream."""
        a = emit_stream(two_mode, ZPolicy(), 50, make_rng(3))
        b = emit_stream(two_mode, ZPolicy(), 50, make_rng(3))
        np.testing.assert_array_equal(a.y, b.y)

    def test_clipping(self, two_mode):
        """Test that covariates beyond B are pulled back to the sphere."""
        far = ZPolicy(name="fixed", center=[10.0])
        stream = emit_stream(two_mode, far, 100, make_rng(2))
        assert stream.clip_rate == 1.0
        norms = np.linalg.norm(stream.x_lift, axis=1)
        np.testing.assert_allclose(norms, np.full(100, 3.0))

    def test_corruption_radius(self, two_mode):
        """Test that corruption lies on the sphere of its radius."""
        model = two_mode.model_copy(update={"corruption": 0.05})
        stream = emit_stream(model, ZPolicy(), 100, make_rng(4))
        np.testing.assert_allclose(
            np.linalg.norm(stream.corruption, axis=1), np.full(100, 0.05)
        )

    def test_truncated_noise(self, two_mode):
        """Test that truncated noise stays within six standard deviations."""
        model = two_mode.model_copy(update={"truncate_noise": True})
        stream = emit_stream(model, ZPolicy(), 1000, make_rng(5))
        assert np.max(np.abs(stream.noise)) <= 0.6 + 1e-12

    def test_to_frame(self, two_mode):
        """Test the tidy export."""
        frame = emit_stream(two_mode, ZPolicy(), 10, make_rng(6)).to_frame()
        assert list(frame.columns) == ["t", "x0", "y0", "hidden_mode"]


class TestZPolicies:
    """Tests for the covariate center policies."""

    @pytest.fixture
    def classifier(self):
        return AffineClassifier(directions=[[-1.0, 0.0], [1.0, 0.0]], offsets=[0, 0])

    def test_random_box(self, classifier):
        """Test that random centers stay in the box."""
        z = ZPolicy(scale=2.0).centers(100, 2, make_rng(0), classifier)
        assert np.all(np.abs(z) <= 2.0)

    def test_random_walk_box(self, classifier):
        """Test that the walk is clipped to the box."""
        policy = ZPolicy(name="random-walk", scale=0.5, step=1.0)
        z = policy.centers(200, 2, make_rng(1), classifier)
        assert np.all(np.abs(z) <= 0.5)

    def test_boundary_hugging(self, classifier):
        """Test that centers land on the boundary between modes 0 and 1."""
        z = ZPolicy(name="boundary-hugging").centers(50, 2, make_rng(2), classifier)
        np.testing.assert_allclose(z[:, 0], np.zeros(50), atol=1e-12)

    def test_callback(self, classifier):
        """Test that a callback replaces the named policy."""
        policy = ZPolicy(callback=lambda t, rng: [float(t), 0.0])
        z = policy.centers(3, 2, make_rng(3), classifier)
        np.testing.assert_array_equal(z[:, 0], [0.0, 1.0, 2.0])


class TestThresholdAdversary:
    """Tests for the binary-expansion stream."""

    def test_threshold_model_labels(self):
        """Test that y = 1 exactly when x <= theta."""
        model = threshold_model(0.3)
        assert classify(model.classifier, [0.3]) == 0
        assert classify(model.classifier, [0.31]) == 1
        assert model.maps[0].apply([0.3, 1.0])[0] == 1.0

    def test_exact_dyadic_points(self):
        """Test the first moves of the dyadic walk."""
        state = AdversaryState()
        state.advance(1)
        state.advance(-1)
        assert state.x == Fraction(1, 2) + Fraction(1, 4) - Fraction(1, 8)
        with pytest.raises(ValueError):
            state.advance(0)

    def test_labels_are_fresh_signs(self):
        """Test that each label is determined by the sign drawn at that round."""
        stream = adversarial_threshold_stream(200, make_rng(0))
        assert stream.labels == [int(s == 1) for s in stream.signs]
        assert all(isinstance(x, Fraction) for x in stream.xs)
        assert stream.labels == [int(x <= stream.theta) for x in stream.xs]

    def test_long_streams_stay_exact(self):
        """Test that long streams keep distinct points."""
        stream = adversarial_threshold_stream(300, make_rng(1))
        assert len(set(stream.xs)) == 300


class TestHardIdentification:
    """Tests for the hidden-mode instance and its explorer."""

    def test_modes_on_segments(self):
        """Test the three regions of the state line."""
        N, j = 10, 4
        dyn = hard_identification_instance(N, j, iota=1, mass=1.0)
        alpha, beta = j / N, 1 / N
        assert classify(dyn.classifier, [1 + alpha - 0.01, 0.0]) == 0
        assert classify(dyn.classifier, [1 + alpha + beta / 2, 0.0]) == 2
        assert classify(dyn.classifier, [1 + alpha + beta + 0.01, 0.0]) == 1
        np.testing.assert_allclose(dyn.offsets[2], [1.0])

    def test_invalid_arguments(self):
        """Test the parameter ranges."""
        with pytest.raises(ValueError):
            hard_identification_instance(10, 0, 1, 1.0)
        with pytest.raises(ValueError):
            hard_identification_instance(10, 3, 0, 1.0)

    def test_short_exploration_mostly_fails(self):
        """Test that a short random exploration rarely finds the segment."""
        rng = make_rng(0)
        failures = 0
        for _ in range(200):
            j = int(rng.integers(1, 201))
            iota = int(rng.choice([-1, 1]))
            dyn = hard_identification_instance(100, j, iota, 1.0)
            failures += explore_hard_instance(dyn, 50, rng).failed
        assert failures / 200 >= 0.35

    def test_wide_segment_is_found(self):
        """Test that a wide segment is identified."""
        dyn = hard_identification_instance(1, 1, iota=-1, mass=1.0)
        result = explore_hard_instance(dyn, 200, make_rng(1))
        assert not result.failed
        assert result.visits > 0
        assert result.estimate == pytest.approx(-1.0, abs=0.05)


class TestSeparation:
    """Tests for smoothed parameter sampling."""

    def test_bound_formula(self):
        """Test the single-mode case and the monotonicity in delta."""
        assert separation_lower_bound(1, 1, 1, 1.0, 0.1) == np.inf
        assert separation_lower_bound(3, 1, 2, 0.5, 0.1) < separation_lower_bound(
            3, 1, 2, 0.5, 0.5
        )

    def test_rarely_below_bound(self):
        """Test that smoothed draws seldom fall below the predicted gap."""
        rng = make_rng(7)
        channel = NoiseChannel.gaussian_for(0.5, 2)
        below = 0
        for _ in range(500):
            sample = sample_separated_parameters(3, 1, 2, 2.0, channel, 0.1, rng)
            assert all(np.linalg.norm(t.matrix) <= 2.0 + 1e-9 for t in sample.maps)
            below += sample.below_bound
        assert below / 500 <= 0.15

    def test_needs_finite_ball(self):
        """Test that an unbounded ball is refused."""
        channel = NoiseChannel.gaussian_for(0.5, 1)
        with pytest.raises(ValueError):
            sample_separated_parameters(2, 1, 1, np.inf, channel, 0.1, make_rng(0))
