"""Diagonal-Gaussian machinery against analytic values and the MC oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from varleak.autodiff import Tensor
from varleak.gaussian import (DiagonalGaussian, GaussianError, PriorSpec,
                              gaussian_log_density, kl_to_standard_normal,
                              mc_kl, mc_kl_to_standard_normal, reparam_sample)


class TestReparamSample:
    def test_zero_eps_returns_mean(self):
        g = DiagonalGaussian(np.array([1.0, -2.0]), np.array([0.5, 3.0]))
        z = reparam_sample(g, np.zeros(2))
        assert np.allclose(z.data, [1.0, -2.0])

    def test_standard_posterior_passes_eps_through(self):
        g = DiagonalGaussian(np.zeros(4), np.ones(4))
        e = np.array([0.3, -1.2, 0.0, 2.5])
        assert np.allclose(reparam_sample(g, e).data, e)

    def test_dimension_mismatch(self):
        g = DiagonalGaussian(np.zeros(3), np.ones(3))
        with pytest.raises(GaussianError):
            reparam_sample(g, np.zeros(4))

    def test_moment_oracle(self):
        mu = np.array([0.7, -1.5])
        sigma = np.array([0.8, 2.0])
        g = DiagonalGaussian(mu, sigma)
        rng = np.random.default_rng(5)
        n = 100_000
        z = reparam_sample(g, rng.standard_normal((n, 2))).data
        assert np.all(np.abs(z.mean(axis=0) - mu) < 3.0 * sigma / np.sqrt(n))
        assert np.all(np.abs(z.var(axis=0) - sigma ** 2) < 0.05 * sigma ** 2)

    def test_differentiable_in_mu_and_sigma(self):
        mu = Tensor(np.array([0.5]), requires_grad=True)
        sigma = Tensor(np.array([2.0]), requires_grad=True)
        g = DiagonalGaussian(mu, sigma)
        z = reparam_sample(g, np.array([3.0]))
        z.sum().backward()
        assert mu.grad[0] == pytest.approx(1.0)
        assert sigma.grad[0] == pytest.approx(3.0)


class TestClosedFormKl:
    def test_standard_normal_is_zero(self):
        for d in (1, 4, 16):
            g = DiagonalGaussian(np.zeros(d), np.ones(d))
            assert float(kl_to_standard_normal(g).item()) == 0.0

    def test_unit_mean_spot_value(self):
        g = DiagonalGaussian(np.array([1.0]), np.array([1.0]))
        assert kl_to_standard_normal(g).item() == pytest.approx(0.5, abs=1e-12)

    def test_doubled_sigma_spot_value(self):
        g = DiagonalGaussian(np.array([0.0]), np.array([2.0]))
        expected = 0.5 * (4.0 - 1.0 - np.log(4.0))
        assert kl_to_standard_normal(g).item() == pytest.approx(expected, abs=1e-12)

    def test_batched_rows_match_singletons(self):
        mu = np.array([[0.0, 1.0], [2.0, -1.0]])
        sigma = np.array([[1.0, 0.5], [2.0, 1.5]])
        batched = kl_to_standard_normal(DiagonalGaussian(mu, sigma)).data
        for i in range(2):
            single = kl_to_standard_normal(
                DiagonalGaussian(mu[i], sigma[i])).item()
            assert batched[i] == pytest.approx(single, abs=1e-12)

    def test_dimension_scaling(self):
        one = kl_to_standard_normal(
            DiagonalGaussian(np.array([0.8]), np.array([1.7]))).item()
        many = kl_to_standard_normal(
            DiagonalGaussian(np.full(6, 0.8), np.full(6, 1.7))).item()
        assert many == pytest.approx(6.0 * one, rel=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(-3, 3), min_size=1, max_size=8),
           st.lists(st.floats(-1.5, 1.5), min_size=1, max_size=8))
    def test_nonnegative_everywhere(self, mu, log_sigma):
        d = min(len(mu), len(log_sigma))
        g = DiagonalGaussian(np.array(mu[:d]), np.exp(np.array(log_sigma[:d])))
        assert kl_to_standard_normal(g).item() >= 0.0

    def test_zero_only_at_standard_normal(self):
        g = DiagonalGaussian(np.array([0.0, 0.1]), np.ones(2))
        assert kl_to_standard_normal(g).item() > 0.0
        g = DiagonalGaussian(np.zeros(2), np.array([1.0, 1.01]))
        assert kl_to_standard_normal(g).item() > 0.0

    def test_rejects_nonpositive_sigma(self):
        with pytest.raises(GaussianError):
            DiagonalGaussian(np.zeros(2), np.array([1.0, 0.0]))

    def test_gradient_matches_finite_differences(self):
        mu0 = np.array([0.4, -1.1, 0.9])
        sig0 = np.array([0.6, 1.8, 1.2])
        mu = Tensor(mu0.copy(), requires_grad=True)
        sigma = Tensor(sig0.copy(), requires_grad=True)
        kl = kl_to_standard_normal(DiagonalGaussian(mu, sigma))
        kl.backward()
        h = 1e-6

        def value(m, s):
            return float(kl_to_standard_normal(
                DiagonalGaussian(m, s)).item())

        for i in range(3):
            dm = np.zeros(3)
            dm[i] = h
            fd = (value(mu0 + dm, sig0) - value(mu0 - dm, sig0)) / (2 * h)
            assert mu.grad[i] == pytest.approx(fd, rel=1e-4)
            fd = (value(mu0, sig0 + dm) - value(mu0, sig0 - dm)) / (2 * h)
            assert sigma.grad[i] == pytest.approx(fd, rel=1e-4)


class TestMonteCarloOracle:
    def test_identical_distributions_vanish(self):
        rng = np.random.default_rng(11)
        prior = PriorSpec(3)
        est = mc_kl(lambda k: prior.sample(rng, k), prior.log_density,
                    prior.log_density, 100_000)
        assert abs(est) <= 0.02
        # and literally zero pointwise for p == q
        est = mc_kl(lambda k: prior.sample(rng, k), prior.log_density,
                    prior.log_density, 1000)
        assert est == 0.0

    def test_shifted_gaussian_analytic_value(self):
        rng = np.random.default_rng(12)

        def sampler(k):
            return 1.0 + rng.standard_normal((k, 1))

        est = mc_kl(
            sampler,
            lambda z: gaussian_log_density(z, np.array([1.0]), np.array([1.0])),
            lambda z: gaussian_log_density(z, np.array([0.0]), np.array([1.0])),
            1_000_000,
        )
        assert est == pytest.approx(0.5, abs=0.01)

    def test_closed_form_agrees_with_oracle(self):
        rng = np.random.default_rng(13)
        for _ in range(5):
            d = int(rng.integers(1, 17))
            mu = rng.uniform(0.5, 2.0, d) * rng.choice([-1.0, 1.0], d)
            sigma = np.exp(rng.uniform(-1.0, 1.0, d))
            g = DiagonalGaussian(mu, sigma)
            closed = kl_to_standard_normal(g).item()
            oracle = mc_kl_to_standard_normal(g, 200_000, rng)
            assert abs(closed - oracle) / closed < 0.02

    def test_requires_at_least_one_sample(self):
        with pytest.raises(ValueError):
            mc_kl(lambda k: np.zeros((k, 1)), lambda z: z, lambda z: z, 0)


class TestPrior:
    def test_log_density_matches_direct_formula(self):
        prior = PriorSpec(4)
        rng = np.random.default_rng(3)
        z = rng.standard_normal((10, 4))
        direct = gaussian_log_density(z, np.zeros(4), np.ones(4))
        assert np.allclose(prior.log_density(z), direct, atol=1e-12)

    def test_sample_shape(self):
        assert PriorSpec(6).sample(np.random.default_rng(0), 5).shape == (5, 6)
