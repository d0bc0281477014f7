import numpy as np
import pytest
from scipy.special import logsumexp

from switching_idm.errors import InferenceError, InvalidArgumentError
from switching_idm.inference import (
    ForwardBackwardResult,
    forward_backward,
    sample_latent_states,
)
from switching_idm.states import JointStateSpace, uniform_initial


def enumerate_paths(log_evidence, pi, init):
    """Oracle: smoothed marginals and log marginal likelihood by summing the
    complete-path joint probability over every one of |Z|^T paths."""
    t_len, z = log_evidence.shape
    log_pi = np.log(pi)
    log_init = np.log(init)
    # log joint over all paths, built as a (z, z, ..., z) tensor
    lp = log_init + log_evidence[0]
    for t in range(1, t_len):
        lp = lp[..., None] + log_pi + log_evidence[t]
    log_total = logsumexp(lp)
    gamma = np.empty((t_len, z))
    for t in range(t_len):
        axes = tuple(ax for ax in range(t_len) if ax != t)
        gamma[t] = np.exp(logsumexp(lp, axis=axes) - log_total)
    return gamma, float(log_total)


def random_instance(rng, t_len, z, scale=3.0):
    log_evidence = scale * rng.standard_normal((t_len, z))
    pi = rng.dirichlet(np.full(z, 0.8), size=z)
    init = rng.dirichlet(np.full(z, 0.8))
    return log_evidence, pi, init


class TestAgainstEnumeration:
    def test_many_random_instances(self):
        rng = np.random.default_rng(0)
        for _ in range(60):
            t_len = int(rng.integers(2, 7))
            z = int(rng.choice([2, 4, 6]))
            log_evidence, pi, init = random_instance(rng, t_len, z)
            fb = forward_backward(log_evidence, pi, init)
            gamma_ref, loglik_ref = enumerate_paths(log_evidence, pi, init)
            np.testing.assert_allclose(fb.gamma, gamma_ref, atol=1e-12)
            assert fb.log_marginal == pytest.approx(loglik_ref, abs=1e-11)

    def test_extreme_evidence_magnitudes(self):
        # local evidence on wildly different scales must not under/overflow
        rng = np.random.default_rng(1)
        log_evidence, pi, init = random_instance(rng, 5, 4, scale=200.0)
        fb = forward_backward(log_evidence, pi, init)
        gamma_ref, loglik_ref = enumerate_paths(log_evidence, pi, init)
        np.testing.assert_allclose(fb.gamma, gamma_ref, atol=1e-10)
        assert fb.log_marginal == pytest.approx(loglik_ref, rel=1e-12)

    def test_long_sequence_stays_finite(self):
        rng = np.random.default_rng(2)
        log_evidence = -500.0 + rng.standard_normal((5000, 4))
        pi = rng.dirichlet(np.ones(4), size=4)
        fb = forward_backward(log_evidence, pi, uniform_initial(JointStateSpace(2, 2)))
        assert np.isfinite(fb.log_marginal)
        assert np.all(np.isfinite(fb.gamma))
        np.testing.assert_allclose(fb.gamma.sum(axis=1), 1.0, atol=1e-12)


class TestDegenerateFactor:
    def test_single_state_chain(self):
        # |Z| = 1: gamma is all ones and the marginal is the evidence sum
        log_evidence = np.array([[-1.0], [-2.5], [-0.25]])
        fb = forward_backward(log_evidence, np.ones((1, 1)), np.ones(1))
        np.testing.assert_array_equal(fb.gamma, np.ones((3, 1)))
        assert fb.log_marginal == pytest.approx(-3.75, abs=1e-12)

    def test_constant_factor_is_marginalized_exactly(self):
        # A factor whose per-step evidence is constant across its states
        # contributes nothing to the other factor's smoothed marginals.
        rng = np.random.default_rng(3)
        t_len, k = 6, 3
        base = rng.standard_normal((t_len, k))
        pi_k = rng.dirichlet(np.ones(k), size=k)
        init_k = rng.dirichlet(np.ones(k))
        fb_small = forward_backward(base, pi_k, init_k)

        # duplicate each column: a second binary factor with uniform
        # dynamics and constant evidence
        big = np.repeat(base, 2, axis=1) + np.log(0.5)
        pi_big = np.kron(pi_k, np.full((2, 2), 0.5))
        init_big = np.repeat(init_k, 2) * 0.5
        fb_big = forward_backward(big, pi_big, init_big)
        collapsed = fb_big.gamma.reshape(t_len, k, 2).sum(axis=2)
        np.testing.assert_allclose(collapsed, fb_small.gamma, atol=1e-10)
        # log 0.5 per step from the constant factor's own evidence
        assert fb_big.log_marginal == pytest.approx(
            fb_small.log_marginal + t_len * np.log(0.5), abs=1e-9
        )


class TestInvariances:
    def test_shift_invariance_of_gamma(self):
        # adding a per-step constant to the log evidence shifts the marginal
        # likelihood but leaves the smoothed posteriors untouched
        rng = np.random.default_rng(4)
        log_evidence, pi, init = random_instance(rng, 8, 4)
        shifts = rng.uniform(-50.0, 50.0, size=8)
        fb1 = forward_backward(log_evidence, pi, init)
        fb2 = forward_backward(log_evidence + shifts[:, None], pi, init)
        np.testing.assert_allclose(fb2.gamma, fb1.gamma, atol=1e-12)
        assert fb2.log_marginal == pytest.approx(
            fb1.log_marginal + shifts.sum(), rel=1e-12
        )

    def test_all_minus_inf_step_raises(self):
        log_evidence = np.zeros((4, 3))
        log_evidence[2] = -np.inf
        pi = np.full((3, 3), 1.0 / 3.0)
        with pytest.raises(InferenceError, match="t=2"):
            forward_backward(log_evidence, pi, np.full(3, 1.0 / 3.0))

    def test_partial_minus_inf_is_fine(self):
        rng = np.random.default_rng(5)
        log_evidence, pi, init = random_instance(rng, 5, 3)
        log_evidence[1, 0] = -np.inf
        fb = forward_backward(log_evidence, pi, init)
        gamma_ref, loglik_ref = enumerate_paths(log_evidence, pi, init)
        assert fb.gamma[1, 0] == 0.0
        np.testing.assert_allclose(fb.gamma, gamma_ref, atol=1e-12)
        assert fb.log_marginal == pytest.approx(loglik_ref, abs=1e-11)


class TestLatentSampling:
    @staticmethod
    def _pair_freqs(draws, t_len, z):
        freq = np.zeros((t_len, z))
        for t in range(t_len):
            freq[t] = np.bincount(draws[:, t], minlength=z)
        return freq / draws.shape[0]

    def test_marginal_mode_matches_gamma(self):
        rng = np.random.default_rng(6)
        log_evidence, pi, init = random_instance(rng, 4, 3)
        fb = forward_backward(log_evidence, pi, init)
        draws = np.stack(
            [sample_latent_states(fb, pi, rng, mode="marginal") for _ in range(20000)]
        )
        freq = self._pair_freqs(draws, 4, 3)
        assert np.max(np.abs(freq - fb.gamma)) < 0.02

    def test_joint_mode_matches_exact_path_posterior(self):
        rng = np.random.default_rng(7)
        t_len, z = 3, 2
        log_evidence, pi, init = random_instance(rng, t_len, z)
        fb = forward_backward(log_evidence, pi, init)
        draws = np.stack(
            [sample_latent_states(fb, pi, rng, mode="joint") for _ in range(40000)]
        )
        # exact path posterior by enumeration
        lp = np.log(init) + log_evidence[0]
        for t in range(1, t_len):
            lp = lp[..., None] + np.log(pi) + log_evidence[t]
        post = np.exp(lp - logsumexp(lp))
        codes = draws[:, 0] * z * z + draws[:, 1] * z + draws[:, 2]
        freq = np.bincount(codes, minlength=z**t_len) / draws.shape[0]
        assert np.max(np.abs(freq - post.ravel())) < 0.01

    def test_joint_mode_singletons_match_gamma(self):
        rng = np.random.default_rng(8)
        log_evidence, pi, init = random_instance(rng, 6, 4)
        fb = forward_backward(log_evidence, pi, init)
        draws = np.stack(
            [sample_latent_states(fb, pi, rng, mode="joint") for _ in range(20000)]
        )
        freq = self._pair_freqs(draws, 6, 4)
        assert np.max(np.abs(freq - fb.gamma)) < 0.02

    def test_unknown_mode(self):
        fb = ForwardBackwardResult(
            gamma=np.full((2, 2), 0.5),
            log_marginal=0.0,
            alpha_hat=np.full((2, 2), 0.5),
        )
        with pytest.raises(InvalidArgumentError):
            sample_latent_states(fb, np.eye(2), np.random.default_rng(9), mode="map")
