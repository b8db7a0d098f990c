"""Robust Bayesian online changepoint detection with density-power scores."""

from .blr import (NigParams, StudentTPredictive, beta_predictive_score,
                  beta_score_derivative, beta_score_log_derivative,
                  conjugate_update, conjugate_update_batch,
                  log_predictive_density, posterior_predictive, power_integral)
from .core import (BetaState, DataError, HazardSpec, NumericDomainError,
                   TimeStep, hazard_log, log_sum_exp)
from .detector import Detector, DetectorSnapshot, ModelSpec, RunLengthEntry, check_cp_bound
from .elbo import ElboContext, ElboGradient, elbo, elbo_gradient, full_optimize, nig_kl, svi_posterior
from .svrg import SvrgHyper, SvrgState, sample_geometric, svrg_observe

__version__ = "0.1.0"

__all__ = [
    "BetaState", "DataError", "Detector", "DetectorSnapshot", "ElboContext",
    "ElboGradient", "HazardSpec", "ModelSpec", "NigParams", "NumericDomainError",
    "RunLengthEntry", "StudentTPredictive", "SvrgHyper", "SvrgState", "TimeStep",
    "beta_predictive_score", "beta_score_derivative", "beta_score_log_derivative",
    "check_cp_bound", "conjugate_update", "conjugate_update_batch", "elbo",
    "elbo_gradient", "full_optimize", "hazard_log", "log_predictive_density",
    "log_sum_exp", "nig_kl", "posterior_predictive", "power_integral",
    "sample_geometric", "svi_posterior", "svrg_observe",
]
