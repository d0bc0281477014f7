import numpy as np
import pytest
from scipy import stats

from switching_idm.distributions import (
    InverseGammaParams,
    NormalWishartParams,
    lognormal_logpdf,
    make_rng,
    mvn_logpdf,
    mvn_logpdf_batch,
    normal_logpdf,
    sample_dirichlet,
    sample_inverse_gamma,
    sample_mvn_from_precision,
    sample_normal_wishart,
    sample_wishart,
)
from switching_idm.errors import InvalidArgumentError, NumericDomainError


def random_spd(rng, d):
    a = rng.standard_normal((d, d))
    return a @ a.T + d * np.eye(d)


class TestDirichlet:
    def test_simplex(self):
        rng = make_rng(0)
        for _ in range(50):
            c = rng.uniform(0.2, 5.0, size=4)
            w = sample_dirichlet(c, rng)
            assert np.all(w > 0.0)
            assert abs(w.sum() - 1.0) < 1e-12

    def test_mean_matches_analytic(self):
        rng = make_rng(1)
        c = np.array([0.5, 1.5, 3.0])
        draws = sample_dirichlet(c, rng, size=40000)
        mean = draws.mean(axis=0)
        expected = c / c.sum()
        se = np.sqrt(expected * (1 - expected) / (c.sum() + 1) / 40000)
        assert np.all(np.abs(mean - expected) < 4 * se + 1e-4)

    def test_tiny_concentrations_stay_positive(self):
        rng = make_rng(2)
        c = np.full(16, 1.0 / 16.0**2)
        draws = sample_dirichlet(c, rng, size=500)
        assert np.all(draws > 0.0)
        assert np.all(np.isfinite(draws))

    def test_rejects_bad_input(self):
        rng = make_rng(3)
        with pytest.raises(InvalidArgumentError):
            sample_dirichlet(np.array([1.0]), rng)
        with pytest.raises(InvalidArgumentError):
            sample_dirichlet(np.array([1.0, 0.0]), rng)
        with pytest.raises(InvalidArgumentError):
            sample_dirichlet(np.array([1.0, np.inf]), rng)


class TestMvnLogpdf:
    def test_matches_scipy(self):
        rng = make_rng(4)
        for _ in range(10):
            d = rng.integers(2, 6)
            prec = random_spd(rng, d)
            mean = rng.standard_normal(d)
            x = rng.standard_normal(d)
            expected = stats.multivariate_normal.logpdf(
                x, mean=mean, cov=np.linalg.inv(prec)
            )
            assert mvn_logpdf(x, mean, prec) == pytest.approx(expected, abs=1e-9)

    def test_batch_matches_loop(self):
        rng = make_rng(5)
        prec = random_spd(rng, 3)
        mean = rng.standard_normal(3)
        xs = rng.standard_normal((20, 3))
        batch = mvn_logpdf_batch(xs, mean, prec)
        for i in range(20):
            assert batch[i] == pytest.approx(mvn_logpdf(xs[i], mean, prec), abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            mvn_logpdf(np.zeros(3), np.zeros(2), np.eye(2))

    def test_non_spd_precision(self):
        with pytest.raises(NumericDomainError):
            mvn_logpdf(np.zeros(2), np.zeros(2), -np.eye(2))


class TestNormalLogpdf:
    def test_matches_scipy(self):
        rng = make_rng(6)
        x = rng.standard_normal(30)
        out = normal_logpdf(x, 0.5, 2.0)
        expected = stats.norm.logpdf(x, loc=0.5, scale=np.sqrt(2.0))
        np.testing.assert_allclose(out, expected, atol=1e-12)


class TestWishart:
    def test_mean_matches_analytic(self):
        rng = make_rng(7)
        scale = random_spd(rng, 3) / 10.0
        dof = 8.0
        draws = sample_wishart(dof, scale, rng, size=20000)
        mean = draws.mean(axis=0)
        # var(W_ij) = dof * (scale_ij^2 + scale_ii * scale_jj)
        var = dof * (scale**2 + np.outer(np.diag(scale), np.diag(scale)))
        se = np.sqrt(var / 20000)
        assert np.all(np.abs(mean - dof * scale) < 4 * se)

    def test_draws_are_spd(self):
        rng = make_rng(8)
        scale = random_spd(rng, 4)
        for _ in range(20):
            w = sample_wishart(6.0, scale, rng)
            np.linalg.cholesky(w)  # raises if not SPD

    def test_dof_below_dimension(self):
        with pytest.raises(InvalidArgumentError):
            sample_wishart(1.5, np.eye(3), make_rng(9))


class TestNormalWishart:
    def test_marginal_moments(self):
        rng = make_rng(10)
        params = NormalWishartParams(
            mean=np.array([1.0, -2.0]), kappa=3.0, dof=7.0, scale=0.2 * np.eye(2)
        )
        means, lams = sample_normal_wishart(params, rng, size=20000)
        assert np.allclose(means.mean(axis=0), params.mean, atol=0.02)
        assert np.allclose(
            lams.mean(axis=0), params.dof * params.scale, atol=0.05
        )

    def test_single_draw_shapes(self):
        rng = make_rng(11)
        params = NormalWishartParams(
            mean=np.zeros(3), kappa=1.0, dof=5.0, scale=np.eye(3)
        )
        mean, lam = sample_normal_wishart(params, rng)
        assert mean.shape == (3,)
        assert lam.shape == (3, 3)

    def test_invalid_params(self):
        with pytest.raises(InvalidArgumentError):
            NormalWishartParams(mean=np.zeros(2), kappa=-1.0, dof=5.0, scale=np.eye(2))
        with pytest.raises(InvalidArgumentError):
            NormalWishartParams(mean=np.zeros(2), kappa=1.0, dof=1.0, scale=np.eye(2))
        with pytest.raises(NumericDomainError):
            NormalWishartParams(mean=np.zeros(2), kappa=1.0, dof=5.0, scale=-np.eye(2))


class TestInverseGamma:
    def test_mean_matches_analytic(self):
        rng = make_rng(12)
        params = InverseGammaParams(shape=5.0, rate=2.0)
        draws = sample_inverse_gamma(params, rng, size=40000)
        expected = params.rate / (params.shape - 1.0)
        var = params.rate**2 / ((params.shape - 1) ** 2 * (params.shape - 2))
        assert abs(draws.mean() - expected) < 4 * np.sqrt(var / 40000)

    def test_positive(self):
        rng = make_rng(13)
        assert sample_inverse_gamma(InverseGammaParams(2.0, 1.0), rng) > 0.0

    def test_invalid(self):
        with pytest.raises(InvalidArgumentError):
            InverseGammaParams(shape=0.0, rate=1.0)


class TestMvnFromPrecision:
    def test_covariance_matches_inverse_precision(self):
        rng = make_rng(14)
        prec = random_spd(rng, 2)
        draws = np.stack(
            [sample_mvn_from_precision(np.zeros(2), prec, rng) for _ in range(20000)]
        )
        cov = np.cov(draws, rowvar=False)
        assert np.allclose(cov, np.linalg.inv(prec), atol=0.05)


class TestLognormalLogpdf:
    def test_change_of_variables(self):
        rng = make_rng(15)
        prec = random_spd(rng, 3)
        mu = rng.standard_normal(3)
        theta = np.exp(rng.standard_normal(3))
        expected = stats.multivariate_normal.logpdf(
            np.log(theta), mean=mu, cov=np.linalg.inv(prec)
        ) - np.sum(np.log(theta))
        assert lognormal_logpdf(theta, mu, prec) == pytest.approx(expected, abs=1e-9)

    def test_scalar_case_matches_scipy_lognorm(self):
        sigma = 0.7
        mu = 0.3
        theta = np.array([1.8])
        expected = stats.lognorm.logpdf(theta[0], s=sigma, scale=np.exp(mu))
        got = lognormal_logpdf(theta, np.array([mu]), np.array([[1 / sigma**2]]))
        assert got == pytest.approx(expected, abs=1e-10)

    def test_rejects_nonpositive(self):
        with pytest.raises(InvalidArgumentError):
            lognormal_logpdf(np.array([1.0, -0.1]), np.zeros(2), np.eye(2))


def test_seed_determinism():
    a = sample_dirichlet(np.array([1.0, 2.0, 3.0]), make_rng(42))
    b = sample_dirichlet(np.array([1.0, 2.0, 3.0]), make_rng(42))
    np.testing.assert_array_equal(a, b)
