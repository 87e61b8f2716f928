import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ibtok.autodiff import Graph, Tensor, forward, grad_check
from ibtok.vib import (
    GaussianPosterior,
    PriorSpec,
    kl_monte_carlo,
    kl_node,
    kl_to_standard_normal,
    sample_reparam,
)

finite = st.floats(-5, 5, allow_nan=False)


class TestPosterior:
    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            GaussianPosterior([0.0, 1.0], [0.0])

    def test_non_finite(self):
        with pytest.raises(ValueError):
            GaussianPosterior([np.nan], [0.0])

    def test_log_sigma_clamped(self):
        post = GaussianPosterior([0.0, 0.0], [-50.0, 50.0])
        assert post.log_sigma.tolist() == [-10.0, 10.0]


class TestSampleReparam:
    def test_zero_noise_returns_mean(self):
        assert sample_reparam(GaussianPosterior([1, 2], [0, 0]), [0, 0]).tolist() == [1, 2]

    def test_unit_scale(self):
        assert sample_reparam(GaussianPosterior([0], [0]), [1]).tolist() == [1]

    def test_scaled(self):
        out = sample_reparam(GaussianPosterior([1], [math.log(2)]), [-1])
        assert out[0] == pytest.approx(-1.0, abs=1e-15)

    def test_noise_dimension_checked(self):
        with pytest.raises(ValueError):
            sample_reparam(GaussianPosterior([0, 0], [0, 0]), [1, 2, 3])

    @given(arrays(np.float64, 4, elements=finite), arrays(np.float64, 4, elements=finite))
    def test_zero_noise_exact_mu(self, mu, ls):
        post = GaussianPosterior(mu, ls)
        assert np.array_equal(sample_reparam(post, np.zeros(4)), post.mu)


class TestClosedFormKL:
    @pytest.mark.parametrize("d", [1, 3, 8])
    def test_prior_has_zero_kl(self, d):
        assert kl_to_standard_normal(GaussianPosterior(np.zeros(d), np.zeros(d))) == 0.0

    def test_shifted_mean(self):
        assert kl_to_standard_normal(GaussianPosterior([1.0], [0.0])) == pytest.approx(0.5, abs=1e-15)

    def test_doubled_scale(self):
        kl = kl_to_standard_normal(GaussianPosterior([0.0], [math.log(2)]))
        assert kl == pytest.approx(0.5 * (4 - 2 * math.log(2) - 1), abs=1e-14)
        assert kl == pytest.approx(0.806853, abs=1e-6)

    @pytest.mark.parametrize("mu, ls, expected", [
        ([1.0], [0.0], 0.5),
        ([0.0], [math.log(2)], 0.806853),
    ])
    def test_agrees_with_monte_carlo(self, mu, ls, expected):
        post = GaussianPosterior(mu, ls)
        est, se = kl_monte_carlo(post, PriorSpec(1), 10**6, seed=1)
        assert abs(est - kl_to_standard_normal(post)) < 3 * se
        assert abs(est - expected) < 3 * se

    @settings(max_examples=200)
    @given(arrays(np.float64, 3, elements=finite), arrays(np.float64, 3, elements=finite))
    def test_non_negative_and_zero_only_at_prior(self, mu, ls):
        post = GaussianPosterior(mu, ls)
        kl = kl_to_standard_normal(post)
        assert kl >= 0
        at_prior = np.all(post.mu == 0) and np.all(post.log_sigma == 0)
        if at_prior:
            assert abs(kl) < 1e-12
        elif np.max(np.abs(np.concatenate([post.mu, post.log_sigma]))) > 1e-4:
            assert kl > 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            d = int(rng.integers(1, 9))
            g = Graph()
            mu, ls = g.input((d,)), g.input((d,))
            kl_node(g, mu, ls)
            pt = [Tensor.from_array(rng.uniform(-2, 2, d)), Tensor.from_array(rng.uniform(-2, 2, d))]
            assert grad_check(g, pt, eps=1e-5, tolerance=1e-5).passed

    def test_batched_kl_is_batch_mean_of_sums(self):
        rng = np.random.default_rng(2)
        mu, ls = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
        g = Graph()
        out = kl_node(g, g.input((5, 3)), g.input((5, 3)))
        val = forward(g, [Tensor.from_array(mu), Tensor.from_array(ls)])[out].item()
        per_row = [kl_to_standard_normal(GaussianPosterior(m, s)) for m, s in zip(mu, ls)]
        assert val == pytest.approx(np.mean(per_row), rel=1e-13)


class TestMonteCarloKL:
    def test_identical_distributions(self):
        est, se = kl_monte_carlo(GaussianPosterior([0.0], [0.0]), PriorSpec(1), 10**5, seed=0)
        # z == eps exactly, so every log-ratio is zero
        assert abs(est) <= 3 * se + 1e-15

    def test_shifted_mean(self):
        est, se = kl_monte_carlo(GaussianPosterior([1.0], [0.0]), PriorSpec(1), 10**6, seed=2)
        assert abs(est - 0.5) < 3 * se

    def test_two_dim_shift(self):
        est, se = kl_monte_carlo(GaussianPosterior([3.0, 3.0], [0.0, 0.0]), PriorSpec(2), 10**6, seed=3)
        assert abs(est - 9.0) < 3 * se

    def test_deterministic(self):
        post = GaussianPosterior([0.3, -1.0], [0.2, -0.4])
        assert kl_monte_carlo(post, PriorSpec(2), 5000, seed=7) == kl_monte_carlo(post, PriorSpec(2), 5000, seed=7)

    def test_minimum_samples(self):
        with pytest.raises(ValueError):
            kl_monte_carlo(GaussianPosterior([0.0], [0.0]), PriorSpec(1), 999)

    def test_prior_dimension_checked(self):
        with pytest.raises(ValueError):
            kl_monte_carlo(GaussianPosterior([0.0], [0.0]), PriorSpec(2), 1000)
