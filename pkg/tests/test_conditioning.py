import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from condgan.conditioning import (
    AugmentedEmbedding,
    ConditioningAugmenter,
    EmbeddingCompressor,
    KL_MODEL_TO_STANDARD,
    augment_embedding,
    ca_kl_regularizer,
    compress_embedding,
)
from helpers import central_difference_grad, mc_kl_standard_to_model


class TestCompressEmbedding:
    def test_zero_weights_zero_bias_gives_zero(self):
        e = torch.randn(6)
        out = compress_embedding(e, torch.zeros(4, 6), torch.zeros(4))
        assert torch.equal(out, torch.zeros(4))

    def test_identity_weights_all_minus_one_gives_leaky_slope(self):
        # leaky slope 0.2 applied to -1
        e = -torch.ones(5)
        out = compress_embedding(e, torch.eye(5), torch.zeros(5))
        torch.testing.assert_close(out, torch.full((5,), -0.2))

    def test_nonnegative_region_is_affine(self):
        e = torch.rand(5)
        w = torch.rand(3, 5)
        b = torch.rand(3)
        out = compress_embedding(e, w, b)
        torch.testing.assert_close(out, e @ w.T + b)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            compress_embedding(torch.randn(4), torch.zeros(3, 5), torch.zeros(3))

    def test_module_matches_function(self):
        mod = EmbeddingCompressor(8, 4)
        e = torch.randn(2, 8)
        expected = compress_embedding(e, mod.fc.weight, mod.fc.bias)
        torch.testing.assert_close(mod(e), expected)


class TestAugmentEmbedding:
    def test_zero_epsilon_returns_mu(self):
        mu = torch.randn(6)
        sigma = torch.rand(6) + 0.1
        out = augment_embedding(mu, sigma, torch.zeros(6))
        assert torch.equal(out.sample, mu)

    def test_standard_passthrough(self):
        eps = torch.randn(6)
        out = augment_embedding(torch.zeros(6), torch.ones(6), eps)
        assert torch.equal(out.sample, eps)

    def test_sample_identity_holds_exactly(self):
        mu = torch.randn(6)
        sigma = torch.rand(6) + 0.1
        eps = torch.randn(6)
        out = augment_embedding(mu, sigma, eps)
        assert torch.equal(out.sample, mu + sigma * eps)

    def test_monte_carlo_moments(self):
        # over 100,000 draws the sample mean approaches mu and the sample
        # std approaches sigma within 1%
        torch.manual_seed(0)
        mu = torch.tensor([0.7, -0.4])
        sigma = torch.tensor([1.3, 0.6])
        eps = torch.randn(100_000, 2)
        out = augment_embedding(mu, sigma, eps)
        assert torch.allclose(out.sample.mean(0), mu, atol=0.01 * 1.3)
        assert torch.allclose(out.sample.std(0), sigma, rtol=0.01)

    def test_nonfinite_epsilon_rejected(self):
        with pytest.raises(ValueError):
            augment_embedding(
                torch.zeros(3), torch.ones(3), torch.tensor([1.0, float("nan"), 0.0])
            )

    def test_nonpositive_sigma_rejected(self):
        with pytest.raises(ValueError):
            augment_embedding(torch.zeros(3), torch.zeros(3), torch.zeros(3))

    def test_gradients_reach_mu_and_sigma_but_never_epsilon(self):
        mu = torch.randn(4, requires_grad=True)
        sigma = (torch.rand(4) + 0.5).requires_grad_(True)
        eps = torch.randn(4, requires_grad=True)
        out = augment_embedding(mu, sigma, eps)
        out.sample.sum().backward()
        assert mu.grad is not None and mu.grad.abs().sum() > 0
        assert sigma.grad is not None and sigma.grad.abs().sum() > 0
        assert eps.grad is None  # epsilon is detached data, never a gradient path

    def test_augmenter_module_end_to_end(self):
        torch.manual_seed(1)
        ca = ConditioningAugmenter(16, 8)
        raw = torch.randn(5, 16)
        out = ca(raw)
        assert isinstance(out, AugmentedEmbedding)
        assert out.sample.shape == (5, 8)
        assert (out.sigma > 0).all()
        torch.testing.assert_close(out.sample, out.mu + out.sigma * out.epsilon)

    def test_mean_embedding_is_mu(self):
        torch.manual_seed(2)
        ca = ConditioningAugmenter(16, 8)
        raw = torch.randn(3, 16)
        mean = ca.mean_embedding(raw)
        torch.testing.assert_close(mean, ca(raw, epsilon=torch.zeros(3, 8)).mu)


class TestKLRegularizer:
    def test_identity_distribution_gives_zero(self):
        for dim in (1, 4, 32):
            out = ca_kl_regularizer(torch.zeros(dim), torch.ones(dim))
            assert float(out) == 0.0

    def test_unit_shift_value(self):
        # mu=1, sigma=1: Monte Carlo oracle over 1e6 standard-normal draws
        # estimates 0.4990; closed form gives exactly 0.5
        mc = mc_kl_standard_to_model(1.0, 1.0, seed=0)
        closed = float(ca_kl_regularizer(torch.tensor([1.0]), torch.tensor([1.0])))
        assert closed == pytest.approx(0.5, abs=1e-12)
        assert closed == pytest.approx(mc, rel=0.01)

    def test_sigma_e_value(self):
        # mu=0, sigma=e: 0.5 * (1 + e^-2) ~= 0.5677, checked by the same
        # Monte Carlo oracle
        mc = mc_kl_standard_to_model(0.0, math.e, seed=1)
        closed = float(
            ca_kl_regularizer(
                torch.tensor([0.0], dtype=torch.float64),
                torch.tensor([math.e], dtype=torch.float64),
            )
        )
        assert closed == pytest.approx(0.5 * (1 + math.exp(-2)), abs=1e-12)
        assert closed == pytest.approx(mc, rel=0.01)

    def test_against_monte_carlo_on_random_pairs(self):
        rng = np.random.default_rng(42)
        for trial in range(5):
            dim = 6
            mu = rng.uniform(0.5, 1.5, dim) * rng.choice([-1.0, 1.0], dim)
            sigma = np.where(
                rng.random(dim) < 0.5,
                rng.uniform(0.6, 0.9, dim),
                rng.uniform(1.2, 1.8, dim),
            )
            mc = mc_kl_standard_to_model(mu, sigma, seed=100 + trial)
            closed = float(
                ca_kl_regularizer(torch.as_tensor(mu), torch.as_tensor(sigma))
            )
            assert closed == pytest.approx(mc, rel=0.01)

    def test_nonpositive_sigma_rejected(self):
        with pytest.raises(ValueError):
            ca_kl_regularizer(torch.zeros(3), torch.tensor([1.0, 0.0, 1.0]))

    @given(
        st.lists(st.floats(-3, 3), min_size=1, max_size=8),
        st.lists(st.floats(0.05, 5), min_size=1, max_size=8),
    )
    @settings(max_examples=60, deadline=None)
    def test_nonnegative_everywhere(self, mu, sigma):
        n = min(len(mu), len(sigma))
        value = float(
            ca_kl_regularizer(torch.tensor(mu[:n]), torch.tensor(sigma[:n]))
        )
        assert value >= -1e-9

    def test_zero_only_at_identity(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            mu = rng.normal(0, 1, 4)
            sigma = rng.uniform(0.3, 2.5, 4)
            if np.allclose(mu, 0) and np.allclose(sigma, 1):
                continue
            value = float(
                ca_kl_regularizer(torch.as_tensor(mu), torch.as_tensor(sigma))
            )
            assert value > 0

    def test_permutation_invariance(self):
        rng = np.random.default_rng(4)
        mu = rng.normal(0, 1, 6)
        sigma = rng.uniform(0.3, 2.0, 6)
        perm = rng.permutation(6)
        a = float(ca_kl_regularizer(torch.as_tensor(mu), torch.as_tensor(sigma)))
        b = float(
            ca_kl_regularizer(torch.as_tensor(mu[perm]), torch.as_tensor(sigma[perm]))
        )
        assert a == pytest.approx(b, abs=1e-12)

    def test_gradient_wrt_mu_and_log_sigma(self):
        # autodiff against central finite differences in (mu, log sigma)
        rng = np.random.default_rng(5)
        point = np.concatenate([rng.normal(0, 1, 4), rng.uniform(-0.5, 0.5, 4)])

        def scalar(x):
            mu = torch.as_tensor(x[:4])
            log_sigma = torch.as_tensor(x[4:])
            return ca_kl_regularizer(mu, torch.exp(log_sigma))

        t = torch.as_tensor(point).requires_grad_(True)
        ca_kl_regularizer(t[:4], torch.exp(t[4:])).backward()
        ad = t.grad.numpy()
        fd = central_difference_grad(lambda x: float(scalar(x)), point)
        assert np.linalg.norm(ad - fd) / max(np.linalg.norm(fd), 1e-12) < 1e-4

    def test_reverse_direction(self):
        mu = torch.tensor([0.5, -0.5])
        sigma = torch.tensor([1.5, 0.8])
        forward = float(ca_kl_regularizer(mu, sigma))
        reverse = float(ca_kl_regularizer(mu, sigma, direction=KL_MODEL_TO_STANDARD))
        expected_reverse = 0.5 * float(
            (mu**2 + sigma**2 - 1 - 2 * torch.log(sigma)).sum()
        )
        assert reverse == pytest.approx(expected_reverse, abs=1e-7)
        assert reverse != pytest.approx(forward, abs=1e-6)
        assert reverse >= 0

    def test_batched_inputs_average_over_batch(self):
        mu = torch.tensor([[1.0, 0.0], [0.0, 0.0]])
        sigma = torch.ones(2, 2)
        # rows contribute 0.5 and 0.0; the batch mean is 0.25
        assert float(ca_kl_regularizer(mu, sigma)) == pytest.approx(0.25)
