"""Doubly-robust online changepoint detector.

Maintains the joint distribution over (run length, model) for a stream,
with both probability paths robustified: predictive densities are replaced
by their density-power scores in the run-length recursion, and each
hypothesis's parameter posterior is the structural variational fit rather
than the conjugate one.

Per step, every retained hypothesis (r, m) is scored on the incoming
observation under its own posterior predictive; the grown hypothesis
(r+1, m) inherits that score plus the no-change hazard, while the reset
hypothesis (0, m) scores the observation under the model's prior
predictive and absorbs the hazard-weighted mass of every predecessor.
The (0, m) posterior starts at the prior and is refined as soon as its
first observation enters its window.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import gammaln

from .blr import (NigParams, beta_predictive_score,
                  beta_score_log_derivative, posterior_predictive)
from .core import (BetaState, HazardSpec, NumericDomainError, TimeStep,
                   log_sum_exp, normalized_weights)
from .svrg import SvrgHyper, SvrgState, svrg_observe

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelSpec:
    """One member of the model universe: an autoregressive BLR.

    ``lag`` and ``include_intercept`` describe the design matrices this
    model expects (p = d * lag + intercept); ``beta_p`` optionally pins a
    model-specific robustness, otherwise the detector-level value is used.
    """

    id: str
    prior: NigParams
    lag: int = 0
    include_intercept: bool = True
    beta_p: Optional[float] = None

    def expected_p(self, d: int) -> int:
        return d * self.lag + (1 if self.include_intercept else 0)


@dataclass
class RunLengthEntry:
    """One retained (run length, model) hypothesis."""

    r: int
    model: str
    log_joint: float
    svrg: SvrgState
    birth_t: int
    map_score: float
    dlog_drlm: float = 0.0

    @property
    def nig(self) -> NigParams:
        return self.svrg.theta


@dataclass
class DetectorSnapshot:
    t: int
    run_length_posterior: Dict[Tuple[int, str], float]
    model_posterior: Dict[str, float]
    prediction: np.ndarray
    prediction_error: np.ndarray
    map_changepoints: List[int]
    beta: BetaState
    log_evidence: float
    dyhat_drlm: Optional[np.ndarray] = None

    def map_run_length(self) -> int:
        return max(self.run_length_posterior, key=self.run_length_posterior.get)[0]


class Detector:
    """Single-stream detector; :meth:`step` must be called serially.

    Per-hypothesis scoring and posterior updates are independent and can be
    fanned out to ``workers`` threads; results are applied in a fixed
    hypothesis order, so threaded and serial runs produce identical output.
    """

    def __init__(self, models: Sequence[ModelSpec], hazard: HazardSpec,
                 hyper: SvrgHyper, beta: BetaState,
                 prune_k: Optional[int] = 50,
                 model_prior: Optional[Dict[str, float]] = None,
                 seed: int = 0, workers: int = 0,
                 track_rlm_derivative: bool = False):
        if not models:
            raise ValueError("model universe must not be empty")
        self.models = {m.id: m for m in models}
        if len(self.models) != len(models):
            raise ValueError("model ids must be unique")
        self._model_order = {m.id: i for i, m in enumerate(models)}
        self.hazard = hazard
        self.hyper = hyper
        self.beta = beta
        self.prune_k = prune_k
        self.seed = seed
        self.workers = workers
        self.track_rlm_derivative = track_rlm_derivative
        if model_prior is None:
            q = 1.0 / len(models)
            self.model_log_prior = {m.id: math.log(q) for m in models}
        else:
            total = sum(model_prior.values())
            self.model_log_prior = {k: math.log(v / total) for k, v in model_prior.items()}
        # static per-model robustness offsets in log space; the shared
        # beta_p remains the single tunable
        self._log_beta_offsets = {}
        for m in models:
            if m.beta_p is not None:
                self._log_beta_offsets[m.id] = math.log(m.beta_p) - math.log(beta.beta_p)
            else:
                self._log_beta_offsets[m.id] = 0.0
        self.entries: List[RunLengthEntry] = []
        self.t = 0
        self._map_best: List[Tuple[float, int]] = []  # per step: (score, birth of argmax)
        self._pool = ThreadPoolExecutor(max_workers=workers) if workers > 0 else None

    # -- helpers ----------------------------------------------------------

    def beta_p_for(self, model_id: str) -> float:
        return math.exp(math.log(self.beta.beta_p) + self._log_beta_offsets[model_id])

    def _design(self, ts_x: Dict[str, np.ndarray], model_id: str) -> np.ndarray:
        try:
            return ts_x[model_id]
        except KeyError:
            raise ValueError(f"time step carries no design for model {model_id!r}") from None

    def _rng_for(self, model_id: str, birth_t: int) -> np.random.Generator:
        key = np.random.SeedSequence(entropy=self.seed,
                                     spawn_key=(self._model_order[model_id], birth_t))
        return np.random.default_rng(key)

    def _sort_entries(self):
        self.entries.sort(key=lambda e: (self._model_order[e.model], e.r))

    # -- prediction -------------------------------------------------------

    def predict(self, x_by_model: Dict[str, np.ndarray]) -> np.ndarray:
        """Posterior-expectation forecast of the next observation."""
        yhat, _ = self._predict_internal(x_by_model, with_gradient=False)
        return yhat

    def _predict_internal(self, x_by_model, with_gradient: bool):
        if not self.entries:
            locs = []
            qs = []
            for mid, model in self.models.items():
                x = self._design(x_by_model, mid)
                locs.append(x @ model.prior.mu)
                qs.append(math.exp(self.model_log_prior[mid]))
            yhat = np.einsum("m,md->d", np.asarray(qs), np.stack(locs))
            return yhat, (np.zeros_like(yhat) if with_gradient else None)
        weights = normalized_weights([e.log_joint for e in self.entries])
        locs = np.stack([self._design(x_by_model, e.model) @ e.nig.mu for e in self.entries])
        yhat = np.einsum("e,ed->d", weights, locs)
        grad = None
        if with_gradient:
            dlogs = np.array([e.dlog_drlm for e in self.entries])
            mix = float(weights @ dlogs)
            dposterior = weights * (dlogs - mix)
            grad = np.einsum("e,ed->d", dposterior, locs)
        return yhat, grad

    # -- one filtering step -------------------------------------------------

    def step(self, ts: TimeStep) -> DetectorSnapshot:
        d = ts.d
        for mid, model in self.models.items():
            x = self._design(ts.x_by_model, mid)
            if x.shape != (d, model.prior.p):
                raise ValueError(
                    f"design for model {mid!r} is {x.shape}, expected ({d}, {model.prior.p})"
                )
        self.t += 1
        beta_rlm = self.beta.beta_rlm

        yhat, dyhat = self._predict_internal(
            ts.x_by_model, with_gradient=self.track_rlm_derivative)
        err = ts.y - yhat

        # score every retained hypothesis under its own predictive
        def score_entry(entry: RunLengthEntry):
            pred = posterior_predictive(entry.nig, self._design(ts.x_by_model, entry.model))
            s = beta_predictive_score(pred, ts.y, beta_rlm)
            ds = (beta_score_log_derivative(pred, ts.y, beta_rlm)
                  if self.track_rlm_derivative else 0.0)
            return s, ds

        if self._pool is not None and self.entries:
            scored = list(self._pool.map(score_entry, self.entries))
        else:
            scored = [score_entry(e) for e in self.entries]

        survivors: List[Tuple[RunLengthEntry, float, float]] = []
        for entry, (s, ds) in zip(self.entries, scored):
            if not np.isfinite(s):
                logger.warning("dropping hypothesis (r=%d, m=%s) at t=%d: score=%r",
                               entry.r, entry.model, self.t, s)
                continue
            survivors.append((entry, s, ds))
        if self.entries and not survivors:
            raise NumericDomainError(f"all hypotheses produced non-finite scores at t={self.t}")

        # prior-predictive scores, one per model
        prior_scores: Dict[str, Tuple[float, float]] = {}
        for mid, model in self.models.items():
            pred0 = posterior_predictive(model.prior, self._design(ts.x_by_model, mid))
            s0 = beta_predictive_score(pred0, ts.y, beta_rlm)
            ds0 = (beta_score_log_derivative(pred0, ts.y, beta_rlm)
                   if self.track_rlm_derivative else 0.0)
            prior_scores[mid] = (s0, ds0)

        new_entries: List[RunLengthEntry] = []
        if survivors:
            prev_lj = np.array([e.log_joint for e, _, _ in survivors])
            lse_prev = log_sum_exp(prev_lj)
            w_prev = normalized_weights(prev_lj)
            dlog_mix = float(w_prev @ np.array([e.dlog_drlm for e, _, _ in survivors]))
            map_prev, _ = self._map_best[-1]
            for entry, s, ds in survivors:
                entry.r += 1
                entry.log_joint += s + self.hazard.log_growth
                entry.map_score += s + self.hazard.log_growth
                entry.dlog_drlm += ds
                new_entries.append(entry)
            for mid in self.models:
                s0, ds0 = prior_scores[mid]
                if not np.isfinite(s0):
                    logger.warning("dropping reset hypothesis for model %s at t=%d", mid, self.t)
                    continue
                lj0 = self.model_log_prior[mid] + s0 + self.hazard.log_cp + lse_prev
                map0 = self.model_log_prior[mid] + s0 + self.hazard.log_cp + map_prev
                new_entries.append(RunLengthEntry(
                    r=0, model=mid, log_joint=lj0,
                    svrg=SvrgState.fresh(self.models[mid].prior, self.hyper,
                                         self._rng_for(mid, self.t)),
                    birth_t=self.t, map_score=map0, dlog_drlm=ds0 + dlog_mix))
        else:
            for mid in self.models:
                s0, ds0 = prior_scores[mid]
                if not np.isfinite(s0):
                    raise NumericDomainError(f"prior score non-finite for model {mid} at t=1")
                new_entries.append(RunLengthEntry(
                    r=0, model=mid,
                    log_joint=self.model_log_prior[mid] + s0,
                    svrg=SvrgState.fresh(self.models[mid].prior, self.hyper,
                                         self._rng_for(mid, self.t)),
                    birth_t=self.t,
                    map_score=self.model_log_prior[mid] + s0,
                    dlog_drlm=ds0))

        # absorb the observation into every hypothesis's posterior
        def update_entry(entry: RunLengthEntry):
            model = self.models[entry.model]
            svrg_observe(entry.svrg, self.hyper, entry.r, ts.y,
                         self._design(ts.x_by_model, entry.model),
                         model.prior, self.beta_p_for(entry.model))

        if self._pool is not None:
            list(self._pool.map(update_entry, new_entries))
        else:
            for entry in new_entries:
                update_entry(entry)

        self.entries = new_entries
        self._sort_entries()
        # record the best segmentation before pruning can discard its entry
        best = max(self.entries, key=lambda e: (e.map_score, e.r))
        self._map_best.append((best.map_score, best.birth_t))
        if self.prune_k is not None:
            self._prune(self.prune_k)

        return self._snapshot(yhat, err, dyhat)

    # -- pruning ------------------------------------------------------------

    def _prune(self, k: int):
        if k < 1:
            raise ValueError("prune_k must be >= 1")
        keep: List[RunLengthEntry] = []
        for mid in self.models:
            mine = [e for e in self.entries if e.model == mid]
            top = sorted(mine, key=lambda e: e.log_joint, reverse=True)[:k]
            kept = set(id(e) for e in top)
            keep.extend(top)
            keep.extend(e for e in mine if e.r == 0 and id(e) not in kept)
        self.entries = keep
        self._sort_entries()

    def prune(self, k: int):
        """Keep the k most probable hypotheses per model plus the reset one.

        Log joints are untouched; normalization happens only at read-out.
        """
        self._prune(k)

    # -- read-outs ------------------------------------------------------------

    @property
    def log_evidence(self) -> float:
        return log_sum_exp([e.log_joint for e in self.entries])

    def _snapshot(self, yhat, err, dyhat) -> DetectorSnapshot:
        weights = normalized_weights([e.log_joint for e in self.entries])
        rl_post = {(e.r, e.model): float(w) for e, w in zip(self.entries, weights)}
        m_post: Dict[str, float] = {mid: 0.0 for mid in self.models}
        for e, w in zip(self.entries, weights):
            m_post[e.model] += float(w)
        return DetectorSnapshot(
            t=self.t, run_length_posterior=rl_post, model_posterior=m_post,
            prediction=yhat, prediction_error=err,
            map_changepoints=self.map_segmentation(),
            beta=self.beta.copy(), log_evidence=self.log_evidence,
            dyhat_drlm=dyhat)

    def map_segmentation(self) -> List[int]:
        """Changepoint times of the maximum a posteriori segmentation.

        A changepoint at time b means the best segmentation starts a new
        segment with the observation at step b.  Backtracks the stored
        per-step best segment births; ties were already broken toward
        longer run lengths when the records were written.
        """
        cps: List[int] = []
        step = len(self._map_best)
        while step >= 1:
            _, birth = self._map_best[step - 1]
            if birth <= 1:
                break
            cps.append(birth)
            step = birth - 1
        return sorted(cps)


# ---------------------------------------------------------------------------
# Theorem-style robustness bound
# ---------------------------------------------------------------------------


def check_cp_bound(prior: NigParams, p: int, beta_rlm: float, hazard: HazardSpec,
                   v_min: float) -> Tuple[bool, float]:
    """Evaluate the single-outlier robustness bound for a BLR model.

    Returns ``(holds, bound_value)`` where ``bound_value`` is the lower
    bound on the growth-versus-reset odds valid for *any* observation,
    provided every retained predictive has scale determinant at least
    ``v_min``.  ``holds`` is ``bound_value >= 1``: no single observation,
    however extreme, can tip the odds toward a changepoint.

    The prior-mode density term is evaluated at the most conservative
    design (identity-free, unit determinant); the current-segment integral
    is bounded through its minimal-dof Stirling envelope for p > 1 and the
    dof-free gamma-ratio bound for p = 1.
    """
    if v_min <= 0:
        raise ValueError("v_min must be positive")
    if p < 1:
        raise ValueError("p must be >= 1")
    if beta_rlm <= 0:
        raise NumericDomainError("beta_rlm must be positive (gamma argument beta*a0)")
    a0, b0 = prior.a, prior.b
    beta = beta_rlm
    # prior-predictive mode density, raised to beta
    log_mode = gammaln(a0 + 0.5 * p) - gammaln(a0) - 0.5 * p * math.log(2.0 * math.pi * b0)
    a_term = math.exp(beta * log_mode)
    # exact power integral of the prior predictive (gamma-ratio part)
    log_ratio = (gammaln(a0 + 0.5 * p) + gammaln(beta * a0 + 0.5 * beta * p + a0)
                 - gammaln(a0) - gammaln(beta * a0 + 0.5 * beta * p + a0 + 0.5 * p))
    prior_integral = a_term * math.exp(log_ratio) / (1.0 + beta)
    # envelope of the current-segment integral at |V| = v_min
    if p == 1:
        log_s = 0.0
    else:
        nu_floor = 1.0
        log_s = (0.5 * beta * (nu_floor + p - 1.0) * math.log1p(p / nu_floor)
                 + beta * (1.0 / (6.0 * (nu_floor + p)) - 0.5 * p))
    seg_envelope = math.exp(
        log_s - 0.5 * beta * math.log(v_min) - 0.5 * beta * p * math.log(math.pi)
    ) / (1.0 + beta)
    h = 1.0 / hazard.lam
    log_bound = math.log1p(-h) - math.log(h) - a_term / beta + prior_integral - seg_envelope
    bound_value = math.exp(log_bound) if log_bound < 700 else math.inf
    return bound_value >= 1.0, bound_value
