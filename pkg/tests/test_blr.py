import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import gammaln

from robocpd.blr import (NigParams, StudentTPredictive, beta_predictive_score,
                         beta_score_derivative, beta_score_log_derivative,
                         conjugate_update, conjugate_update_batch,
                         log_predictive_density, posterior_predictive,
                         power_integral)


def random_predictive(rng, d=None, nu=None):
    d = d or int(rng.integers(1, 3))
    nu = nu or 1.5 + rng.uniform(0.0, 8.0)
    a_mat = rng.normal(size=(d, d))
    scale = a_mat @ a_mat.T + 0.5 * np.eye(d)
    return StudentTPredictive(dof=nu, loc=rng.normal(size=d), scale=scale)


def quad_power_integral(pred, beta):
    """Quadrature oracle: reduce to the radial profile and integrate to inf."""
    d = pred.d
    nu = pred.dof
    lognorm = (gammaln(0.5 * (nu + d)) - gammaln(0.5 * nu)
               - 0.5 * d * np.log(nu * np.pi) - 0.5 * pred.log_det_scale())

    if d == 1:
        f = lambda r: np.exp((1 + beta) * (lognorm - 0.5 * (nu + 1) * np.log1p(r * r / nu)))
        half, _ = quad(f, 0, np.inf, epsabs=1e-14, epsrel=1e-12, limit=400)
        scale = math.sqrt(pred.scale[0, 0])
        return 2.0 * half * scale
    assert d == 2
    f = lambda r: 2 * np.pi * r * np.exp(
        (1 + beta) * (lognorm - 0.5 * (nu + 2) * np.log1p(r * r / nu)))
    val, _ = quad(f, 0, np.inf, epsabs=1e-14, epsrel=1e-12, limit=400)
    det_chol = float(np.prod(np.diag(pred.scale_chol())))
    return val * det_chol


class TestConjugateUpdate:
    def test_zero_observation_at_prior_mean(self):
        prior = NigParams(a=1.0, b=1.0, mu=np.zeros(1), prec_chol=np.eye(1))
        post = conjugate_update(prior, np.zeros(1), np.ones((1, 1)))
        assert post.a == pytest.approx(1.5)
        assert post.b == pytest.approx(1.0)
        assert post.mu[0] == pytest.approx(0.0)
        assert post.covariance()[0, 0] == pytest.approx(0.5)

    def test_matches_batch_least_squares_with_prior(self):
        # oracle: prior as pseudo-observations, solved by lstsq
        rng = np.random.default_rng(5)
        prior = NigParams.from_covariance(2.0, 3.0, rng.normal(size=2),
                                          np.diag([2.0, 0.5]))
        x = rng.normal(size=(1, 2))
        y = rng.normal(size=1)
        post = conjugate_update(prior, y, x)
        l0 = np.linalg.cholesky(prior.precision())
        big_x = np.vstack([x, l0.T])
        big_y = np.concatenate([y, l0.T @ prior.mu])
        mu_ls, *_ = np.linalg.lstsq(big_x, big_y, rcond=None)
        np.testing.assert_allclose(post.mu, mu_ls, rtol=1e-10)

    def test_sequential_equals_batch(self):
        rng = np.random.default_rng(11)
        prior = NigParams.from_covariance(1.5, 2.0, rng.normal(size=3),
                                          np.diag(rng.uniform(0.5, 2.0, size=3)))
        ys = [rng.normal(size=2) for _ in range(6)]
        xs = [rng.normal(size=(2, 3)) for _ in range(6)]
        seq = prior
        for y, x in zip(ys, xs):
            seq = conjugate_update(seq, y, x)
        batch = conjugate_update_batch(prior, ys, xs)
        assert seq.a == pytest.approx(batch.a, rel=1e-12)
        assert seq.b == pytest.approx(batch.b, rel=1e-10)
        np.testing.assert_allclose(seq.mu, batch.mu, rtol=1e-10)
        np.testing.assert_allclose(seq.precision(), batch.precision(), rtol=1e-10)

    def test_order_invariance(self):
        rng = np.random.default_rng(7)
        prior = NigParams.from_covariance(1.5, 2.0, np.zeros(2), np.eye(2))
        ys = [rng.normal(size=1) for _ in range(8)]
        xs = [rng.normal(size=(1, 2)) for _ in range(8)]
        perm = rng.permutation(8)
        fwd = conjugate_update_batch(prior, ys, xs)
        shuf = conjugate_update_batch(prior, [ys[i] for i in perm], [xs[i] for i in perm])
        assert fwd.b == pytest.approx(shuf.b, rel=1e-10)
        np.testing.assert_allclose(fwd.mu, shuf.mu, atol=1e-10)

    def test_dimension_mismatch_is_usage_error(self):
        prior = NigParams(a=1.0, b=1.0, mu=np.zeros(2), prec_chol=np.eye(2))
        with pytest.raises(ValueError):
            conjugate_update(prior, np.zeros(1), np.ones((1, 3)))


class TestPosteriorPredictive:
    def test_zero_regressor_isolates_noise_scale(self):
        params = NigParams(a=3.0, b=5.0, mu=np.zeros(1), prec_chol=np.eye(1))
        pred = posterior_predictive(params, np.zeros((1, 1)))
        assert pred.dof == pytest.approx(6.0)
        assert pred.loc[0] == pytest.approx(0.0)
        assert pred.scale[0, 0] == pytest.approx(5.0 / 3.0)

    def test_prior_mode_density_formula(self):
        # mode density: Gamma(a0 + d/2) / (Gamma(a0) (2 b0 pi)^{d/2} |I + X S0 X'|^{1/2})
        a0, b0 = 3.0, 5.0
        rng = np.random.default_rng(3)
        for d, p in [(1, 1), (2, 3)]:
            sigma0 = np.diag(rng.uniform(0.5, 3.0, size=p))
            mu0 = rng.normal(size=p)
            x = rng.normal(size=(d, p))
            prior = NigParams.from_covariance(a0, b0, mu0, sigma0)
            pred = posterior_predictive(prior, x)
            got = math.exp(log_predictive_density(pred, x @ mu0))
            det = np.linalg.det(np.eye(d) + x @ sigma0 @ x.T)
            want = math.exp(gammaln(a0 + 0.5 * d) - gammaln(a0)) / (
                (2.0 * b0 * math.pi) ** (0.5 * d) * math.sqrt(det))
            assert got == pytest.approx(want, rel=1e-12)

    def test_density_integrates_to_one_d1(self):
        rng = np.random.default_rng(9)
        params = NigParams.from_covariance(2.5, 3.0, rng.normal(size=2),
                                           np.diag([1.5, 0.7]))
        pred = posterior_predictive(params, rng.normal(size=(1, 2)))
        f = lambda z: math.exp(log_predictive_density(pred, np.array([z])))
        total, _ = quad(f, -np.inf, np.inf, limit=400)
        assert total == pytest.approx(1.0, rel=1e-9)


class TestLogPredictiveDensity:
    def test_standard_cauchy_at_mode(self):
        pred = StudentTPredictive(dof=1.0, loc=np.zeros(1), scale=np.eye(1))
        assert log_predictive_density(pred, np.zeros(1)) == pytest.approx(math.log(1 / math.pi))

    def test_matches_quadrature_normalized_kernel_d2(self):
        rng = np.random.default_rng(21)
        pred = random_predictive(rng, d=2, nu=5.0)
        y = pred.loc + rng.normal(size=2)
        # oracle: unnormalized kernel, normalized by the radial quadrature of itself
        vinv = np.linalg.inv(pred.scale)
        maha = (y - pred.loc) @ vinv @ (y - pred.loc)
        kernel = (1 + maha / pred.dof) ** (-0.5 * (pred.dof + 2))
        f = lambda r: 2 * np.pi * r * (1 + r * r / pred.dof) ** (-0.5 * (pred.dof + 2))
        area, _ = quad(f, 0, np.inf, limit=400)
        det_chol = float(np.prod(np.diag(pred.scale_chol())))
        want = math.log(kernel / (area * det_chol))
        assert log_predictive_density(pred, y) == pytest.approx(want, rel=1e-10)

    def test_monotone_in_mahalanobis_distance(self):
        pred = StudentTPredictive(dof=4.0, loc=np.zeros(1), scale=np.eye(1))
        vals = [log_predictive_density(pred, np.array([z])) for z in (0.0, 0.5, 1.5, 4.0)]
        assert all(a > b for a, b in zip(vals, vals[1:]))


class TestPowerIntegral:
    def test_beta_to_zero_limit_is_one(self):
        pred = StudentTPredictive(dof=6.0, loc=np.zeros(1), scale=np.array([[5 / 3]]))
        assert power_integral(pred, 1e-12) == pytest.approx(1.0, rel=1e-9)

    def test_spec_fixture_d1_vs_quadrature(self):
        pred = StudentTPredictive(dof=6.0, loc=np.zeros(1), scale=np.array([[5 / 3]]))
        got = power_integral(pred, 0.15)
        want = quad_power_integral(pred, 0.15)
        assert got == pytest.approx(want, rel=1e-8)

    def test_spec_fixture_d2_vs_quadrature(self):
        pred = StudentTPredictive(dof=4.0, loc=np.zeros(2), scale=np.eye(2))
        got = power_integral(pred, 0.25)
        want = quad_power_integral(pred, 0.25)
        assert got == pytest.approx(want, rel=1e-6)

    def test_random_fixtures_vs_quadrature(self):
        rng = np.random.default_rng(31)
        for _ in range(20):
            d = int(rng.integers(1, 3))
            pred = random_predictive(rng, d=d)
            beta = 10 ** rng.uniform(-2, 0.3)
            got = power_integral(pred, beta)
            want = quad_power_integral(pred, beta)
            assert got == pytest.approx(want, rel=1e-6 if d == 1 else 1e-5)

    def test_decreasing_in_scale_determinant(self):
        vals = []
        for v in (0.5, 1.0, 2.0, 8.0):
            pred = StudentTPredictive(dof=5.0, loc=np.zeros(1), scale=np.array([[v]]))
            vals.append(power_integral(pred, 0.3))
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_large_dof_stays_finite(self):
        pred = StudentTPredictive(dof=2e6, loc=np.zeros(2), scale=np.eye(2))
        assert np.isfinite(power_integral(pred, 2.5))  # d*beta = 5


class TestBetaPredictiveScore:
    def test_kld_limit(self):
        pred = StudentTPredictive(dof=6.0, loc=np.zeros(1), scale=np.array([[5 / 3]]))
        y = np.array([0.7])
        beta = 1e-6
        score = beta_predictive_score(pred, y, beta)
        integral = power_integral(pred, beta)
        reduced = score - (1.0 / beta - integral / (1.0 + beta))
        assert reduced == pytest.approx(log_predictive_density(pred, y), abs=1e-4)

    def test_gross_outlier_influence_is_bounded(self):
        pred = StudentTPredictive(dof=6.0, loc=np.zeros(1), scale=np.array([[5 / 3]]))
        beta = 0.2
        limit = -power_integral(pred, beta) / (1.0 + beta)
        far = beta_predictive_score(pred, np.array([1e8]), beta)
        assert far == pytest.approx(limit, rel=1e-6)
        # bounds hold everywhere
        upper = (math.exp(beta * log_predictive_density(pred, pred.loc)) / beta) + limit
        for y in (0.0, 1.0, 5.0, 50.0):
            s = beta_predictive_score(pred, np.array([y]), beta)
            assert limit <= s <= upper + 1e-12

    def test_spec_fixture_two_term_direct_evaluation(self):
        pred = StudentTPredictive(dof=6.0, loc=np.zeros(1), scale=np.array([[5 / 3]]))
        beta, y = 0.15, np.array([2.0])
        # independent scalar re-implementation of both closed-form terms
        dens = math.exp(gammaln(3.5) - gammaln(3.0) - 0.5 * math.log(6 * math.pi)
                        - 0.5 * math.log(5 / 3) - 3.5 * math.log1p((4.0 * 3 / 5) / 6))
        eta = beta * 7 + 6
        integral = math.exp((1 + beta) * (gammaln(3.5) - gammaln(3.0))
                            + gammaln(eta / 2) - gammaln((eta + 1) / 2)
                            - 0.5 * beta * math.log(6 * math.pi)
                            - 0.5 * beta * math.log(5 / 3))
        want = dens**beta / beta - integral / (1 + beta)
        assert beta_predictive_score(pred, y, beta) == pytest.approx(want, rel=1e-12)


class TestBetaScoreDerivative:
    def test_matches_finite_difference(self):
        rng = np.random.default_rng(17)
        h = 1e-6
        for _ in range(25):
            pred = random_predictive(rng)
            beta = 10 ** rng.uniform(-1.5, 0.3)
            y = pred.loc + rng.normal(size=pred.d) * 2.0
            up = math.exp(beta_predictive_score(pred, y, beta + h))
            dn = math.exp(beta_predictive_score(pred, y, beta - h))
            fd = (up - dn) / (2 * h)
            got = beta_score_derivative(pred, y, beta)
            assert got == pytest.approx(fd, rel=1e-4)

    def test_symmetry_of_reflected_observation(self):
        pred = StudentTPredictive(dof=5.0, loc=np.zeros(1), scale=np.array([[2.0]]))
        plus = beta_score_derivative(pred, np.array([1.3]), 0.2)
        minus = beta_score_derivative(pred, np.array([-1.3]), 0.2)
        assert plus == pytest.approx(minus, rel=1e-12)

    def test_finite_near_floor(self):
        # The log-scale derivative is finite all the way down to the floor;
        # the non-log pseudo-density exp(score) only fits in float64 for
        # beta >~ 1/709 because the score grows like 1/beta.
        pred = StudentTPredictive(dof=5.0, loc=np.zeros(1), scale=np.array([[2.0]]))
        assert np.isfinite(beta_score_log_derivative(pred, np.array([0.5]), 1e-10))
        assert np.isfinite(beta_score_derivative(pred, np.array([0.5]), 2e-3))


class TestNigParamsValidation:
    def test_rejects_non_lower_triangular(self):
        bad = np.array([[1.0, 0.5], [0.0, 1.0]])
        with pytest.raises(ValueError):
            NigParams(a=1.0, b=1.0, mu=np.zeros(2), prec_chol=bad)

    def test_rejects_nonpositive_diag(self):
        with pytest.raises(ValueError):
            NigParams(a=1.0, b=1.0, mu=np.zeros(1), prec_chol=np.array([[-1.0]]))

    def test_rejects_bad_scalars(self):
        with pytest.raises(ValueError):
            NigParams(a=0.0, b=1.0, mu=np.zeros(1), prec_chol=np.eye(1))
        with pytest.raises(ValueError):
            NigParams(a=1.0, b=math.inf, mu=np.zeros(1), prec_chol=np.eye(1))
