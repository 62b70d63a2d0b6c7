"""Tests for noise channels and the directional smoothness scan."""

import math

import numpy as np
import pytest
from scipy.stats import ks_2samp

from src.pwa.core import make_rng
from src.pwa.errors import DimensionError, InsufficientDataError
from src.pwa.smoothing import (
    NoiseChannel,
    concatenated_smoothness_bound,
    estimate_directional_smoothness,
    sample_smoothed,
)


class TestNoiseChannel:
    """Tests for channel construction and sampling."""

    def test_gaussian_claim(self):
        """Test that a Gaussian claims sqrt(2 pi) sigma."""
        channel = NoiseChannel(kind="gaussian", dimension=2, sigma=0.5)
        assert channel.sigma_dir == pytest.approx(math.sqrt(2 * math.pi) * 0.5)

    def test_gaussian_for(self):
        """Test building a Gaussian from its claimed smoothness."""
        channel = NoiseChannel.gaussian_for(0.2, 1)
        assert channel.sigma_dir == pytest.approx(0.2)

    def test_uniform_ball_claim_and_support(self):
        """Test the claim and the support of the uniform ball."""
        channel = NoiseChannel(kind="uniform_ball", dimension=3, sigma=2.0)
        assert channel.sigma_dir == pytest.approx(1.0)
        draws = channel.sample(make_rng(0), 2000)
        assert draws.shape == (2000, 3)
        assert np.max(np.linalg.norm(draws, axis=1)) <= 2.0

    def test_point_mass_needs_claim(self):
        """Test that a point mass must state the smoothness it claims."""
        with pytest.raises(ValueError):
            NoiseChannel(kind="point_mass", dimension=1)
        channel = NoiseChannel(kind="point_mass", dimension=1, claimed_sigma_dir=1.0)
        np.testing.assert_array_equal(channel.sample(make_rng(0), 3), np.zeros((3, 1)))

    def test_custom_sampler(self):
        """Test that a custom sampler is used and shape-checked."""
        channel = NoiseChannel(
            kind="custom",
            dimension=2,
            claimed_sigma_dir=0.1,
            sampler=lambda rng, n: np.ones((n, 2)),
        )
        np.testing.assert_array_equal(channel.sample(make_rng(0), 2), np.ones((2, 2)))
        broken = channel.model_copy(update={"sampler": lambda rng, n: np.ones(n)})
        with pytest.raises(DimensionError):
            broken.sample(make_rng(0), 2)

    def test_smooth_channel_needs_scale(self):
        """Test that a zero-width Gaussian is rejected."""
        with pytest.raises(ValueError):
            NoiseChannel(kind="gaussian", dimension=1, sigma=0.0)


class TestSampleSmoothed:
    """Tests for adding channel noise to a center."""

    def test_single_and_batch(self):
        """Test one center and a batch of centers."""
        channel = NoiseChannel(kind="gaussian", dimension=2, sigma=1.0)
        assert sample_smoothed([0.0, 0.0], channel, make_rng(0)).shape == (2,)
        assert sample_smoothed(np.zeros((5, 2)), channel, make_rng(0)).shape == (5, 2)

    def test_dimension_mismatch(self):
        """Test that the center must live in the channel's space."""
        channel = NoiseChannel(kind="gaussian", dimension=2, sigma=1.0)
        with pytest.raises(DimensionError):
            sample_smoothed([0.0], channel, make_rng(0))

    def test_noise_independent_of_center(self):
        """Test that the added noise has the same law at two centers."""
        channel = NoiseChannel.gaussian_for(1.0, 2)
        centers = np.zeros((100_000, 2))
        near = sample_smoothed(centers, channel, make_rng(1)) - centers
        far = sample_smoothed(centers + 5.0, channel, make_rng(2)) - (centers + 5.0)
        assert ks_2samp(near[:, 0], far[:, 0]).statistic < 0.02
        np.testing.assert_allclose(near.mean(axis=0), np.zeros(2), atol=3e-2)


class TestSmoothnessScan:
    """Tests for the Monte-Carlo smoothness certificate."""

    def test_gaussian_passes(self):
        """Test that a Gaussian channel meets its claim."""
        channel = NoiseChannel(kind="gaussian", dimension=3, sigma=1.0)
        report = estimate_directional_smoothness(
            channel, np.zeros(3), 100_000, 8, make_rng(1)
        )
        assert report.passed
        assert report.bound == pytest.approx(1.0 / channel.sigma_dir)
        assert report.density_bound == pytest.approx(2.0 * report.definition_bound)

    def test_uniform_ball_passes(self):
        """Test that a uniform ball meets its claim of half the radius."""
        channel = NoiseChannel(kind="uniform_ball", dimension=2, sigma=1.0)
        report = estimate_directional_smoothness(
            channel, np.ones(2), 100_000, 8, make_rng(2)
        )
        assert report.passed

    def test_point_mass_fails(self):
        """Test that a point mass cannot be smooth."""
        channel = NoiseChannel(kind="point_mass", dimension=1, claimed_sigma_dir=1.0)
        report = estimate_directional_smoothness(
            channel, np.zeros(1), 10_000, 4, make_rng(3)
        )
        assert not report.passed
        assert report.worst_density > 10.0

    def test_density_convention(self):
        """Test that the density convention judges against 2 / sigma_dir."""
        channel = NoiseChannel(kind="gaussian", dimension=1, sigma=1.0)
        report = estimate_directional_smoothness(
            channel, np.zeros(1), 20_000, 2, make_rng(4), convention="density"
        )
        assert report.bound == pytest.approx(2.0 / channel.sigma_dir)
        assert report.passed

    def test_too_few_samples(self):
        """Test that small scans are refused."""
        channel = NoiseChannel(kind="gaussian", dimension=1, sigma=1.0)
        with pytest.raises(InsufficientDataError):
            estimate_directional_smoothness(channel, np.zeros(1), 999, 2, make_rng(0))


class TestConcatenation:
    """Tests for the smoothness of [z | u] under linear feedback."""

    def test_zero_gain(self):
        """Test the open-loop case."""
        assert concatenated_smoothness_bound(1.0, 0.0) == pytest.approx(
            1.0 / math.sqrt(2.0)
        )

    def test_decreases_with_gain(self):
        """Test that larger gains give weaker smoothness."""
        assert concatenated_smoothness_bound(1.0, 2.0) < concatenated_smoothness_bound(
            1.0, 1.0
        )

    def test_invalid(self):
        """Test that non-positive smoothness is rejected."""
        with pytest.raises(ValueError):
            concatenated_smoothness_bound(0.0, 1.0)
