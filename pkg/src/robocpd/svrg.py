"""Anchored variance-reduced stochastic optimizer for streaming windows.

Two-stage scheme per retained run length: while the run is younger than the
window size, the iterate is periodically re-anchored by a full constrained
optimization over the whole window; once the window saturates, the anchor
is refreshed at geometric random intervals from the current iterate, as in
standard variance-reduced gradient methods.  Between refreshes, each new
observation triggers a handful of inner steps using small batches sampled
without replacement, corrected by the anchor gradient.

State is constant in the stream length: only the W most recent
observations of a run are retained.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .blr import NigParams
from .elbo import ElboContext, ElboGradient, elbo_gradient, svi_posterior


@dataclass(frozen=True)
class SvrgHyper:
    """Window/batch geometry and step sizes.

    window >= anchor_batch >= inner_batch >= 1; the anchor batch is normally
    strictly larger than the inner one, but the degenerate all-equal setting
    (everything covering the window) is admitted and reduces each update to
    a plain full-gradient ascent step.
    """

    window: int = 360
    anchor_batch: int = 25
    inner_batch: int = 10
    refresh_every: int = 20
    inner_steps: int = 1
    step_size: float = 1e-3
    step_decay: bool = False
    opt_tol: float = 1e-8
    opt_max_iter: int = 500

    def __post_init__(self):
        if not (self.window >= self.anchor_batch >= self.inner_batch >= 1):
            raise ValueError("require window >= anchor_batch >= inner_batch >= 1")
        if self.refresh_every < 1 or self.inner_steps < 1:
            raise ValueError("refresh_every and inner_steps must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")

    @property
    def geom_success(self) -> float:
        return self.anchor_batch / (self.anchor_batch + self.inner_batch)


def sample_geometric(p_success: float, rng: np.random.Generator) -> int:
    """Number of trials until the first success, support {1, 2, ...}."""
    if not (0.0 < p_success <= 1.0):
        raise ValueError("success probability must lie in (0, 1]")
    return int(rng.geometric(p_success))


@dataclass
class SvrgState:
    """Per-run-length optimizer state: current iterate, anchor, countdown
    and the ring buffer of the run's most recent observations."""

    theta: NigParams
    theta_anchor: NigParams
    rng: np.random.Generator
    g_anchor: Optional[ElboGradient] = None
    tau: int = 0
    window_ys: deque = field(default_factory=deque)  # newest first
    window_xs: deque = field(default_factory=deque)
    inner_count: int = 0
    failed_opts: int = 0

    @classmethod
    def fresh(cls, prior: NigParams, hyper: SvrgHyper, rng: np.random.Generator) -> "SvrgState":
        return cls(theta=prior, theta_anchor=prior, rng=rng,
                   window_ys=deque(maxlen=hyper.window),
                   window_xs=deque(maxlen=hyper.window))

    @property
    def n_window(self) -> int:
        return len(self.window_ys)

    def window_bytes(self) -> int:
        """Resident size of the buffered observations (space-contract probe)."""
        return sum(y.nbytes for y in self.window_ys) + sum(x.nbytes for x in self.window_xs)


def _step_params(theta: NigParams, grad: ElboGradient, eta: float) -> NigParams:
    from .elbo import BOX_MARGIN, CHOL_FLOOR

    l_mat = np.tril(theta.prec_chol + eta * grad.d_prec_chol)
    np.fill_diagonal(l_mat, np.maximum(np.diag(l_mat), CHOL_FLOOR))
    return NigParams(a=max(theta.a + eta * grad.d_a, 1.0 + BOX_MARGIN),
                     b=max(theta.b + eta * grad.d_b, 1.0 + BOX_MARGIN),
                     mu=theta.mu + eta * grad.d_mu, prec_chol=l_mat)


def _batch_mean_gradient(theta: NigParams, state: SvrgState, indices: np.ndarray,
                         prior: NigParams, beta_p: float) -> ElboGradient:
    """Mean per-observation gradient over the given buffer indices.

    Each observation carries 1/n_window of the prior-coupling block, so the
    mean over a uniform batch is an unbiased estimate of (1/n) times the
    full-window gradient.
    """
    ys = [state.window_ys[i] for i in indices]
    xs = [state.window_xs[i] for i in indices]
    ctx = ElboContext.from_steps(prior, ys, xs, beta_p,
                                 prior_scale=len(indices) / state.n_window)
    return elbo_gradient(theta, ctx).scaled(1.0 / len(indices))


def svrg_observe(state: SvrgState, hyper: SvrgHyper, r: int, y: Optional[np.ndarray],
                 x: Optional[np.ndarray], prior: NigParams, beta_p: float) -> SvrgState:
    """One outer iteration of the anchored optimizer for a new observation.

    ``r`` is the run length after absorbing the observation, so the buffer
    holds min(r + 1, W) entries afterwards.  The countdown decrements once
    per observation.  Returns the (mutated) state.
    """
    if y is None:
        if state.n_window == 0:
            return state
        raise ValueError("y may only be omitted for an empty buffer")
    state.window_ys.appendleft(np.atleast_1d(np.asarray(y, dtype=float)))
    state.window_xs.appendleft(np.atleast_2d(np.asarray(x, dtype=float)))
    n_avail = state.n_window

    if state.tau <= 0:
        if r < hyper.window:
            fitted, ok = svi_posterior(prior, list(state.window_ys), list(state.window_xs),
                                       beta_p, tol=hyper.opt_tol, max_iter=hyper.opt_max_iter)
            if not ok:
                state.failed_opts += 1
            state.theta = fitted
            state.theta_anchor = fitted
            state.tau = hyper.refresh_every
        else:
            state.theta_anchor = state.theta
            state.tau = sample_geometric(hyper.geom_success, state.rng)
        b_anchor = min(hyper.anchor_batch, r, n_avail)
        if b_anchor >= 1:
            idx = state.rng.choice(n_avail, size=b_anchor, replace=False)
            state.g_anchor = _batch_mean_gradient(state.theta_anchor, state, idx,
                                                  prior, beta_p)
        else:
            state.g_anchor = None

    b_inner = min(hyper.inner_batch, r, n_avail)
    if b_inner >= 1 and state.g_anchor is not None:
        for _ in range(hyper.inner_steps):
            idx = state.rng.choice(n_avail, size=b_inner, replace=False)
            g_old = _batch_mean_gradient(state.theta_anchor, state, idx, prior, beta_p)
            g_new = _batch_mean_gradient(state.theta, state, idx, prior, beta_p)
            direction = g_new.add(g_old.scaled(-1.0)).add(state.g_anchor)
            state.inner_count += 1
            eta = hyper.step_size
            if hyper.step_decay:
                eta = eta / np.sqrt(state.inner_count)
            state.theta = _step_params(state.theta, direction, eta)

    state.tau -= 1
    return state


def copy_state(state: SvrgState) -> SvrgState:
    """Independent copy sharing nothing mutable (RNG state included)."""
    dup = SvrgState(theta=state.theta, theta_anchor=state.theta_anchor,
                    rng=np.random.default_rng(), g_anchor=state.g_anchor,
                    tau=state.tau, inner_count=state.inner_count,
                    failed_opts=state.failed_opts,
                    window_ys=deque(state.window_ys, maxlen=state.window_ys.maxlen),
                    window_xs=deque(state.window_xs, maxlen=state.window_xs.maxlen))
    dup.rng.bit_generator.state = state.rng.bit_generator.state
    return dup
