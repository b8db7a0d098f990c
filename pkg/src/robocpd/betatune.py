"""Choosing the divergence parameters: initialization and online descent.

Initialization inverts the influence curve: for a candidate beta_p, the
influence of a synthetic observation is measured as the KL divergence
between the prior and the one-observation variational posterior, as a
function of the observation's Mahalanobis distance from the prior
predictive location.  For beta_p > 0 that curve has an interior maximum
which moves toward the mode as beta_p grows; bisection finds the beta_p
whose maximum sits at the target distance.

Online, both parameters descend the empirical predictive loss: the
run-length component via the exact derivative recursion carried by the
detector, the posterior component via a central finite difference between
two shadow detectors running at beta_p (1 +/- delta).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .blr import NigParams, posterior_predictive
from .core import EPS_MIN, BetaState, TimeStep
from .detector import Detector
from .elbo import nig_kl, svi_posterior

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class InfluenceProbe:
    """Grid specification for the influence scan.

    ``target_md`` is the Mahalanobis distance at which influence should be
    maximal; ``grid`` the strictly increasing distances scanned.
    ``mc_samples`` is accepted for callers that swap in a sampled influence
    estimator; the closed-form KL surrogate used here is deterministic and
    ignores it.
    """

    target_md: float
    grid: np.ndarray
    mc_samples: int = 0

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        object.__setattr__(self, "grid", grid)
        if grid.ndim != 1 or grid.size < 3:
            raise ValueError("grid must be a 1-D array with at least 3 points")
        if np.any(np.diff(grid) <= 0) or grid[0] <= 0:
            raise ValueError("grid must be strictly increasing and positive")
        if not (grid[0] <= self.target_md <= grid[-1]):
            raise ValueError("target_md must lie inside the grid range")

    @classmethod
    def default(cls, d: int, k: float = 3.0, n_grid: int = 40) -> "InfluenceProbe":
        """k-th sd target for d <= 3, sqrt(d) for higher dimensions."""
        target = k if d <= 3 else math.sqrt(d)
        hi = max(3.0 * target, target + 4.0)
        return cls(target_md=target, grid=np.linspace(hi / n_grid, hi, n_grid))


@dataclass(frozen=True)
class LossSpec:
    """Bounded absolute predictive loss L(x) = min(||x||_1, tau_loss) and
    the per-component step clips for the divergence updates."""

    clip_rlm: float
    clip_p: float
    tau_loss: float = math.inf
    fd_step: float = 0.1
    kind: str = "bounded-absolute"

    def __post_init__(self):
        if self.kind != "bounded-absolute":
            raise ValueError(f"unsupported loss kind {self.kind!r}")
        if min(self.clip_rlm, self.clip_p, self.fd_step) <= 0 or self.tau_loss <= 0:
            raise ValueError("all loss-spec constants must be positive")

    def loss(self, err: np.ndarray) -> float:
        return min(float(np.sum(np.abs(err))), self.tau_loss)

    def dloss_dyhat(self, err: np.ndarray) -> np.ndarray:
        """Gradient of the loss w.r.t. the prediction (zero once clipped)."""
        if float(np.sum(np.abs(err))) >= self.tau_loss:
            return np.zeros_like(err)
        return -np.sign(err)


# ---------------------------------------------------------------------------
# Influence-matched initialization
# ---------------------------------------------------------------------------


def influence_at(beta_p: float, prior: NigParams, x_model: np.ndarray,
                 md: float, probe: InfluenceProbe) -> float:
    """Influence of one observation placed at Mahalanobis distance ``md``.

    The observation sits at loc + md * chol(V) e1 of the prior predictive;
    the influence is KL(one-observation posterior || prior).
    """
    if md < 0:
        raise ValueError("md must be non-negative")
    pred = posterior_predictive(prior, x_model)
    direction = np.zeros(pred.d)
    direction[0] = 1.0
    y_star = pred.loc + md * (pred.scale_chol() @ direction)
    post, _ = svi_posterior(prior, [y_star], [x_model], beta_p)
    return nig_kl(post, prior)


def influence_curve(beta_p: float, prior: NigParams, x_model: np.ndarray,
                    probe: InfluenceProbe) -> np.ndarray:
    return np.array([influence_at(beta_p, prior, x_model, md, probe)
                     for md in probe.grid])


def _argmax_md(beta_p: float, prior: NigParams, x_model: np.ndarray,
               probe: InfluenceProbe) -> float:
    curve = influence_curve(beta_p, prior, x_model, probe)
    return float(probe.grid[int(np.argmax(curve))])


def init_beta_p(prior: NigParams, x_model: np.ndarray, d: int,
                probe: Optional[InfluenceProbe] = None,
                max_bisect: int = 30) -> Tuple[float, bool]:
    """Solve for the beta_p whose influence maximum sits at the target MD.

    Bisection on [EPS_MIN, 2]: the maximum-influence distance decreases in
    beta_p, so the bracket shrinks until the argmax lands on the grid point
    nearest the target.  Returns (beta_p, ok); when the bracket never
    straddles the target the nearer boundary is returned with ok=False.
    """
    if probe is None:
        probe = InfluenceProbe.default(d)
    grid = probe.grid
    target = float(grid[int(np.argmin(np.abs(grid - probe.target_md)))])

    lo, hi = EPS_MIN, 2.0
    md_lo = _argmax_md(lo, prior, x_model, probe)
    md_hi = _argmax_md(hi, prior, x_model, probe)
    if md_lo < target:
        logger.warning("influence maximum already below target at beta_p=%.1e", lo)
        return lo, False
    if md_hi > target:
        logger.warning("influence maximum above target even at beta_p=%.1e", hi)
        return hi, False
    for _ in range(max_bisect):
        mid = math.sqrt(lo * hi)  # beta spans orders of magnitude
        md_mid = _argmax_md(mid, prior, x_model, probe)
        if md_mid == target:
            return mid, True
        if md_mid > target:
            lo = mid
        else:
            hi = mid
    return math.sqrt(lo * hi), True


# ---------------------------------------------------------------------------
# Online tuning
# ---------------------------------------------------------------------------


class OnlineBetaTuner:
    """Drives Eq.-style descent of (beta_rlm, beta_p) alongside a detector.

    Owns the BetaState shared with the main detector and two shadow
    detectors at beta_p (1 +/- delta) used for the numerical beta_p
    gradient.  The main detector must be constructed with
    ``track_rlm_derivative=True``.
    """

    def __init__(self, main: Detector, loss: LossSpec,
                 make_shadow, delta: Optional[float] = None):
        """``make_shadow(beta_p) -> Detector`` builds a shadow detector with
        the given posterior robustness and everything else identical."""
        self.main = main
        self.loss = loss
        self.beta = main.beta
        self.beta.clip_rlm = loss.clip_rlm
        self.beta.clip_p = loss.clip_p
        self.delta = loss.fd_step if delta is None else delta
        self.shadow_plus = make_shadow(self.beta.beta_p * (1.0 + self.delta))
        self.shadow_minus = make_shadow(self.beta.beta_p * (1.0 - self.delta))
        self.skipped_p_steps = 0

    def step(self, ts: TimeStep):
        """Advance main and shadows on one observation and buffer gradients."""
        snap_plus = self.shadow_plus.step(ts)
        snap_minus = self.shadow_minus.step(ts)
        snap = self.main.step(ts)

        dl_dyhat = self.loss.dloss_dyhat(snap.prediction_error)
        grad_rlm = float(dl_dyhat @ snap.dyhat_drlm)
        self.beta.push_rlm(grad_rlm, snap.t)

        keys_plus = set(snap_plus.run_length_posterior)
        keys_minus = set(snap_minus.run_length_posterior)
        if keys_plus != keys_minus:
            self.skipped_p_steps += 1
            logger.info("t=%d: shadow hypothesis sets diverged; skipping beta_p sample", snap.t)
        else:
            spread = 2.0 * self.delta * self.beta.beta_p
            dyhat_dp = (snap_plus.prediction - snap_minus.prediction) / spread
            grad_p = float(dl_dyhat @ dyhat_dp)
            stepped = self.beta.push_p(grad_p, snap.t)
            if stepped:
                self._retarget_shadows()
        return snap

    def _retarget_shadows(self):
        self.shadow_plus.beta.beta_p = self.beta.beta_p * (1.0 + self.delta)
        self.shadow_minus.beta.beta_p = self.beta.beta_p * (1.0 - self.delta)
