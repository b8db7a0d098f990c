"""Bayesian linear regression with a Normal-Inverse-Gamma prior.

The model is y = X mu + eps with eps ~ N(0, sigma^2 I_d), mu | sigma^2 ~
N(mu0, sigma^2 Sigma0) and sigma^2 ~ IG(a0, b0).  This module provides the
exact conjugate update, the Student-t posterior predictive, and the
robust (density-power) predictive score built from the closed-form power
integral of the multivariate t.

Precision matrices are carried as lower-triangular Cholesky factors L with
Sigma^{-1} = L L' throughout; the variational optimizer differentiates with
respect to the same parameterization, so nothing ever converts back and
forth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import digamma, gammaln

from .core import NumericDomainError


@dataclass(frozen=True)
class NigParams:
    """Normal-Inverse-Gamma parameter block.

    Parameters
    ----------
    a, b : float
        Inverse-gamma shape and scale, both > 0.
    mu : ndarray, shape (p,)
        Location of the coefficient block.
    prec_chol : ndarray, shape (p, p)
        Lower-triangular L with Sigma^{-1} = L L'.
    """

    a: float
    b: float
    mu: np.ndarray
    prec_chol: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        L = np.atleast_2d(np.asarray(self.prec_chol, dtype=float))
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "prec_chol", L)
        if not (np.isfinite(self.a) and self.a > 0):
            raise ValueError(f"shape a must be finite and positive, got {self.a}")
        if not (np.isfinite(self.b) and self.b > 0):
            raise ValueError(f"scale b must be finite and positive, got {self.b}")
        p = mu.size
        if L.shape != (p, p):
            raise ValueError(f"prec_chol must be ({p}, {p}), got {L.shape}")
        if np.any(np.triu(L, 1) != 0):
            raise ValueError("prec_chol must be lower triangular")
        if np.any(np.diag(L) <= 0):
            raise ValueError("prec_chol must have strictly positive diagonal")

    @property
    def p(self) -> int:
        return self.mu.size

    def precision(self) -> np.ndarray:
        """Sigma^{-1} = L L'."""
        return self.prec_chol @ self.prec_chol.T

    def covariance(self) -> np.ndarray:
        """Sigma = (L L')^{-1}."""
        eye = np.eye(self.p)
        return cho_solve((self.prec_chol, True), eye)

    def log_det_precision(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.prec_chol))))

    @staticmethod
    def from_covariance(a: float, b: float, mu: np.ndarray, sigma: np.ndarray) -> "NigParams":
        sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
        prec = np.linalg.inv(sigma)
        prec = 0.5 * (prec + prec.T)
        return NigParams(a=a, b=b, mu=mu, prec_chol=np.linalg.cholesky(prec))


@dataclass(frozen=True)
class StudentTPredictive:
    """Multivariate Student-t posterior predictive: dof nu, location, and
    the scale matrix V appearing inside the t kernel (not the variance)."""

    dof: float
    loc: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        loc = np.atleast_1d(np.asarray(self.loc, dtype=float))
        V = np.atleast_2d(np.asarray(self.scale, dtype=float))
        object.__setattr__(self, "loc", loc)
        object.__setattr__(self, "scale", V)
        if not (self.dof > 0 and np.isfinite(self.dof)):
            raise ValueError("dof must be positive and finite")
        if V.shape != (loc.size, loc.size):
            raise ValueError("scale matrix must be d x d")

    @property
    def d(self) -> int:
        return self.loc.size

    def scale_chol(self) -> np.ndarray:
        try:
            return np.linalg.cholesky(self.scale)
        except np.linalg.LinAlgError as exc:
            raise NumericDomainError(f"predictive scale not positive definite: {exc}") from exc

    def log_det_scale(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.scale_chol()))))


# ---------------------------------------------------------------------------
# Conjugate machinery
# ---------------------------------------------------------------------------


def conjugate_update(prior: NigParams, y: np.ndarray, x: np.ndarray) -> NigParams:
    """Exact standard-Bayes NIG posterior after one observation block (y, X).

    This is the beta -> 0 reference posterior and the initializer for the
    variational optimizer.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = y.size
    if x.shape != (d, prior.p):
        raise ValueError(f"design must be ({d}, {prior.p}), got {x.shape}")
    prec0 = prior.precision()
    prec_n = prec0 + x.T @ x
    h = prec0 @ prior.mu + x.T @ y
    chol_n = np.linalg.cholesky(prec_n)
    mu_n = cho_solve((chol_n, True), h)
    a_n = prior.a + 0.5 * d
    b_n = prior.b + 0.5 * (y @ y + prior.mu @ prec0 @ prior.mu - mu_n @ prec_n @ mu_n)
    if b_n <= 0:
        raise NumericDomainError(f"conjugate scale collapsed to {b_n}")
    return NigParams(a=a_n, b=b_n, mu=mu_n, prec_chol=chol_n)


def conjugate_update_batch(prior: NigParams, ys, xs) -> NigParams:
    """Conjugate posterior on a stacked window; equals sequential updates."""
    ys = [np.atleast_1d(np.asarray(y, dtype=float)) for y in ys]
    xs = [np.atleast_2d(np.asarray(x, dtype=float)) for x in xs]
    prec0 = prior.precision()
    prec_n = prec0.copy()
    h = prec0 @ prior.mu
    a_n = prior.a
    yty = 0.0
    for y, x in zip(ys, xs):
        prec_n += x.T @ x
        h += x.T @ y
        a_n += 0.5 * y.size
        yty += float(y @ y)
    chol_n = np.linalg.cholesky(prec_n)
    mu_n = cho_solve((chol_n, True), h)
    b_n = prior.b + 0.5 * (yty + prior.mu @ prec0 @ prior.mu - mu_n @ prec_n @ mu_n)
    if b_n <= 0:
        raise NumericDomainError(f"conjugate scale collapsed to {b_n}")
    return NigParams(a=a_n, b=b_n, mu=mu_n, prec_chol=chol_n)


def posterior_predictive(params: NigParams, x: np.ndarray) -> StudentTPredictive:
    """Student-t predictive: nu = 2a, loc = X mu, V = (b/a)(I_d + X Sigma X')."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != params.p:
        raise ValueError(f"design has {x.shape[1]} columns, expected {params.p}")
    d = x.shape[0]
    # X Sigma X' via triangular solves against L (Sigma^{-1} = L L').
    w = solve_triangular(params.prec_chol, x.T, lower=True)  # (p, d)
    xsx = w.T @ w
    v = (params.b / params.a) * (np.eye(d) + xsx)
    return StudentTPredictive(dof=2.0 * params.a, loc=x @ params.mu, scale=0.5 * (v + v.T))


def log_predictive_density(pred: StudentTPredictive, y: np.ndarray) -> float:
    """Exact multivariate Student-t log density at y."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    d = pred.d
    nu = pred.dof
    chol = pred.scale_chol()
    z = solve_triangular(chol, y - pred.loc, lower=True)
    maha = float(z @ z)
    return float(
        gammaln(0.5 * (nu + d))
        - gammaln(0.5 * nu)
        - 0.5 * d * np.log(nu * np.pi)
        - 0.5 * pred.log_det_scale()
        - 0.5 * (nu + d) * np.log1p(maha / nu)
    )


# ---------------------------------------------------------------------------
# Density-power (robust) scores
# ---------------------------------------------------------------------------


def log_power_integral(pred: StudentTPredictive, beta: float) -> float:
    """log of integral f(z)^{1+beta} dz for the Student-t predictive.

    Assembled purely from log-gamma differences so it stays finite for
    large dof; the gamma argument (beta (nu+d) + nu)/2 is positive for all
    beta > 0.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    nu, d = pred.dof, pred.d
    eta = beta * (nu + d) + nu
    return float(
        (1.0 + beta) * (gammaln(0.5 * (nu + d)) - gammaln(0.5 * nu))
        + gammaln(0.5 * eta)
        - gammaln(0.5 * (eta + d))
        - 0.5 * d * beta * np.log(nu * np.pi)
        - 0.5 * beta * pred.log_det_scale()
    )


def power_integral(pred: StudentTPredictive, beta: float) -> float:
    """integral f(z)^{1+beta} dz in closed form."""
    return float(np.exp(log_power_integral(pred, beta)))


def beta_predictive_score(pred: StudentTPredictive, y: np.ndarray, beta_rlm: float) -> float:
    """Robust log score: (1/beta) f(y)^beta - (1/(1+beta)) integral f^{1+beta}.

    The first term is computed as 1/beta + expm1(beta log f)/beta so that
    score differences between hypotheses stay accurate as beta -> 0.
    Bounded below by the negative integral term for any y, which is what
    caps the influence of gross outliers.
    """
    if beta_rlm <= 0:
        raise ValueError("beta_rlm must be positive")
    logf = log_predictive_density(pred, y)
    integral = np.exp(log_power_integral(pred, beta_rlm))
    return float(
        1.0 / beta_rlm
        + np.expm1(beta_rlm * logf) / beta_rlm
        - integral / (1.0 + beta_rlm)
    )


def _log_power_integral_dbeta(pred: StudentTPredictive, beta: float) -> float:
    """d/dbeta of log integral f^{1+beta}; the three summands are the
    log-derivatives of the gamma-ratio factors of the closed form."""
    nu, d = pred.dof, pred.d
    eta = beta * (nu + d) + nu
    return float(
        (gammaln(0.5 * (nu + d)) - gammaln(0.5 * nu))
        + 0.5 * (nu + d) * (digamma(0.5 * eta) - digamma(0.5 * (eta + d)))
        - 0.5 * d * np.log(nu * np.pi)
        - 0.5 * pred.log_det_scale()
    )


def beta_score_log_derivative(pred: StudentTPredictive, y: np.ndarray, beta_rlm: float) -> float:
    """d/dbeta of the robust log score (the quantity the recursion adds up).

    Writing the score as (1/b) f^b - G(b)/(1+b) with G the power integral,
    the derivative is -f^b/b^2 + f^b log f / b + G/(1+b)^2 - G'(b)/(1+b).
    """
    if beta_rlm <= 0:
        raise ValueError("beta_rlm must be positive")
    b = beta_rlm
    logf = log_predictive_density(pred, y)
    fb = np.exp(b * logf)
    big_g = np.exp(log_power_integral(pred, b))
    dlog_g = _log_power_integral_dbeta(pred, b)
    return float(-fb / b**2 + fb * logf / b + big_g / (1.0 + b) ** 2 - big_g * dlog_g / (1.0 + b))


def beta_score_derivative(pred: StudentTPredictive, y: np.ndarray, beta_rlm: float) -> float:
    """d/dbeta of the robust pseudo-density f^beta(y) = exp(score), non-log."""
    score = beta_predictive_score(pred, y, beta_rlm)
    return float(np.exp(score) * beta_score_log_derivative(pred, y, beta_rlm))
