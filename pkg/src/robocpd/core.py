"""Shared domain types and log-domain probability arithmetic.

Everything downstream of this module keeps probabilities in natural-log
space: run-length joints, hazard transitions and predictive scores are
added, never multiplied, and only :func:`log_sum_exp` ever exponentiates.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Dict, Sequence

import numpy as np
from scipy.special import logsumexp as _scipy_logsumexp

#: Numerical floor for both divergence parameters.  Values below this make
#: the exponentiated-density arithmetic unstable, so the tuner clamps here.
EPS_MIN = 1e-10

NEG_INF = float("-inf")


class DataError(Exception):
    """Malformed or non-finite input data (CSV rows, NaN cells, ...)."""


class NumericDomainError(Exception):
    """A numerical quantity left its mathematical domain (e.g. a power base
    or gamma argument that must be positive)."""


# ---------------------------------------------------------------------------
# Observations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeStep:
    """One observation vector together with its per-model design matrices.

    Parameters
    ----------
    t : int
        Non-negative time index.
    y : ndarray, shape (d,)
        Observation vector.
    x_by_model : dict
        Maps model id to a (d, p_m) design matrix.
    """

    t: int
    y: np.ndarray
    x_by_model: Dict[str, np.ndarray]

    def __post_init__(self):
        y = np.atleast_1d(np.asarray(self.y, dtype=float))
        object.__setattr__(self, "y", y)
        if self.t < 0:
            raise ValueError(f"time index must be non-negative, got {self.t}")
        if y.ndim != 1 or y.size < 1:
            raise ValueError("y must be a vector of length d >= 1")
        if not np.all(np.isfinite(y)):
            raise DataError(f"non-finite observation at t={self.t}")
        d = y.size
        clean = {}
        for mid, x in self.x_by_model.items():
            x = np.atleast_2d(np.asarray(x, dtype=float))
            if x.shape[0] != d:
                raise ValueError(
                    f"design matrix for model {mid!r} has {x.shape[0]} rows, expected {d}"
                )
            if not np.all(np.isfinite(x)):
                raise DataError(f"non-finite design entry for model {mid!r} at t={self.t}")
            clean[mid] = x
        object.__setattr__(self, "x_by_model", clean)

    @property
    def d(self) -> int:
        return self.y.size


# ---------------------------------------------------------------------------
# Hazard
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HazardSpec:
    """Constant run-length hazard: a changepoint occurs with probability
    1/lambda at every step, independent of the current run length."""

    lam: float
    kind: str = "constant"

    def __post_init__(self):
        if self.kind != "constant":
            raise ValueError(f"unsupported hazard kind {self.kind!r}")
        if not (self.lam > 1.0 and np.isfinite(self.lam)):
            raise ValueError("lambda must be a finite real > 1 so that h in (0, 1)")

    @property
    def log_cp(self) -> float:
        """log H(0, r) = log h."""
        return -float(np.log(self.lam))

    @property
    def log_growth(self) -> float:
        """log H(r+1, r) = log(1 - h)."""
        return float(np.log1p(-1.0 / self.lam))


def hazard_log(spec: HazardSpec, from_r: int, to_r: int) -> float:
    """Log transition probability of the run-length kernel.

    Only two transitions carry mass: a reset to zero (probability h) and a
    unit increment (probability 1-h).  Everything else returns -inf.
    """
    if from_r < 0:
        raise ValueError("run length must be non-negative")
    if to_r == 0:
        return spec.log_cp
    if to_r == from_r + 1:
        return spec.log_growth
    return NEG_INF


# ---------------------------------------------------------------------------
# Log-domain arithmetic
# ---------------------------------------------------------------------------


def log_sum_exp(values: Sequence[float]) -> float:
    """log(sum(exp(v))) with max-subtraction; exact -inf when all inputs are.

    Raises
    ------
    ValueError
        If ``values`` is empty.
    """
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise ValueError("log_sum_exp of an empty collection")
    return float(_scipy_logsumexp(arr))


def normalized_weights(log_values: Sequence[float]) -> np.ndarray:
    """exp(v - log_sum_exp(v)); a probability vector, robust to -inf entries."""
    arr = np.asarray(log_values, dtype=float)
    total = log_sum_exp(arr)
    if total == NEG_INF:
        raise NumericDomainError("all hypotheses carry zero mass")
    w = np.exp(arr - total)
    return w / w.sum()


# ---------------------------------------------------------------------------
# Divergence-parameter state
# ---------------------------------------------------------------------------


def inverse_time_schedule(t: int) -> float:
    """Step size 1/t, the schedule used for the online divergence updates."""
    return 1.0 / max(t, 1)


@dataclass
class BetaState:
    """The pair of divergence parameters with their update machinery.

    ``beta_rlm`` robustifies the run-length/model recursion, ``beta_p`` the
    per-hypothesis parameter posteriors.  Gradient samples are buffered and
    averaged over ``buffer_len`` observations before a step is applied;
    applied steps are clipped componentwise and the result clamped to
    ``eps_min`` from below.
    """

    beta_rlm: float
    beta_p: float
    eps_min: float = EPS_MIN
    step_schedule: Callable[[int], float] = inverse_time_schedule
    clip_rlm: float = 1.0
    clip_p: float = 0.1
    buffer_len: int = 50
    grad_buffer_rlm: deque = field(default_factory=deque)
    grad_buffer_p: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.eps_min <= 0:
            raise ValueError("eps_min must be positive")
        if self.clip_rlm <= 0 or self.clip_p <= 0:
            raise ValueError("step clips must be positive")
        if self.buffer_len < 1:
            raise ValueError("buffer_len must be >= 1")
        self.beta_rlm = max(float(self.beta_rlm), self.eps_min)
        self.beta_p = max(float(self.beta_p), self.eps_min)

    def _apply(self, current: float, grad_mean: float, eta: float, clip: float) -> float:
        step = -eta * grad_mean
        step = float(np.clip(step, -clip, clip))
        return max(current + step, self.eps_min)

    def push_rlm(self, grad: float, t: int) -> bool:
        """Buffer one gradient sample; steps beta_rlm when the buffer fills."""
        self.grad_buffer_rlm.append(float(grad))
        if len(self.grad_buffer_rlm) < self.buffer_len:
            return False
        mean = float(np.mean(self.grad_buffer_rlm))
        self.grad_buffer_rlm.clear()
        self.beta_rlm = self._apply(self.beta_rlm, mean, self.step_schedule(t), self.clip_rlm)
        return True

    def push_p(self, grad: float, t: int) -> bool:
        """Buffer one gradient sample; steps beta_p when the buffer fills."""
        self.grad_buffer_p.append(float(grad))
        if len(self.grad_buffer_p) < self.buffer_len:
            return False
        mean = float(np.mean(self.grad_buffer_p))
        self.grad_buffer_p.clear()
        self.beta_p = self._apply(self.beta_p, mean, self.step_schedule(t), self.clip_p)
        return True

    def copy(self) -> "BetaState":
        return BetaState(
            beta_rlm=self.beta_rlm,
            beta_p=self.beta_p,
            eps_min=self.eps_min,
            step_schedule=self.step_schedule,
            clip_rlm=self.clip_rlm,
            clip_p=self.clip_p,
            buffer_len=self.buffer_len,
            grad_buffer_rlm=deque(self.grad_buffer_rlm),
            grad_buffer_p=deque(self.grad_buffer_p),
        )
