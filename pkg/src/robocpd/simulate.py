"""Synthetic piecewise-autoregressive stream generation.

Streams are d parallel AR(lag) processes with per-segment coefficients and
levels.  Noise is Gaussian by default; one stream may be switched to
Student-t noise (the misspecified-channel setup), and sporadic gross
outliers can be mixed in at a given rate.  Every run writes a ground-truth
changepoint sidecar next to the data file.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class SegmentSpec:
    """One stationary regime: per-stream AR coefficients (d, lag) and levels (d,)."""

    coefs: np.ndarray
    means: np.ndarray

    def __post_init__(self):
        coefs = np.atleast_2d(np.asarray(self.coefs, dtype=float))
        means = np.atleast_1d(np.asarray(self.means, dtype=float))
        object.__setattr__(self, "coefs", coefs)
        object.__setattr__(self, "means", means)
        if coefs.shape[0] != means.shape[0]:
            raise ValueError("coefs and means must agree on the number of streams")


@dataclass(frozen=True)
class SimSpec:
    """Full stream description.

    ``cp_times`` are 1-based indices at which a new segment starts; the
    first segment implicitly starts at t=1, so len(segments) must equal
    len(cp_times) + 1.
    """

    t_total: int
    segments: Sequence[SegmentSpec]
    cp_times: Sequence[int]
    noise_scale: np.ndarray
    noise_kind: str = "gaussian"
    noise_dof: float = 4.0
    t_noise_stream: Optional[int] = None
    outlier_frac: float = 0.0
    outlier_dof: float = 1.0
    outlier_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "noise_scale",
                           np.atleast_1d(np.asarray(self.noise_scale, dtype=float)))
        if len(self.segments) != len(self.cp_times) + 1:
            raise ValueError("need exactly one more segment than changepoints")
        if sorted(self.cp_times) != list(self.cp_times) or any(
                not (1 < c <= self.t_total) for c in self.cp_times):
            raise ValueError("cp_times must be increasing and inside (1, T]")
        if self.noise_kind not in ("gaussian", "student-t"):
            raise ValueError(f"unknown noise kind {self.noise_kind!r}")
        if not (0.0 <= self.outlier_frac < 1.0):
            raise ValueError("outlier_frac must lie in [0, 1)")
        for si, seg in enumerate(self.segments):
            rho = _spectral_radius(seg.coefs)
            if rho >= 1.0:
                raise ValueError(
                    f"segment {si} is non-stationary (spectral radius {rho:.3f}): "
                    f"coefficients {seg.coefs.tolist()}"
                )

    @property
    def d(self) -> int:
        return self.segments[0].means.size

    @property
    def lag(self) -> int:
        return self.segments[0].coefs.shape[1]


def _spectral_radius(coefs: np.ndarray) -> float:
    """Largest companion-matrix eigenvalue magnitude over the streams."""
    worst = 0.0
    for row in np.atleast_2d(coefs):
        lag = row.size
        if lag == 0:
            continue
        comp = np.zeros((lag, lag))
        comp[0, :] = row
        if lag > 1:
            comp[1:, :-1] = np.eye(lag - 1)
        worst = max(worst, float(np.max(np.abs(np.linalg.eigvals(comp)))))
    return worst


def simulate(spec: SimSpec) -> tuple[np.ndarray, List[int]]:
    """Draw the stream; returns (y, cp_times) with y of shape (T, d)."""
    rng = np.random.default_rng(spec.seed)
    d, lag, t_total = spec.d, spec.lag, spec.t_total
    starts = [1] + list(spec.cp_times)
    seg_of_t = np.zeros(t_total + 1, dtype=int)
    for si, start in enumerate(starts):
        seg_of_t[start:] = si
    scale = np.broadcast_to(spec.noise_scale, (d,))
    y = np.zeros((t_total + lag, d))
    burn_seg = spec.segments[0]
    y[:lag] = burn_seg.means
    for t in range(1, t_total + 1):
        seg = spec.segments[seg_of_t[t]]
        row = seg.means.copy()
        for k in range(lag):
            row += seg.coefs[:, k] * (y[lag + t - 2 - k] - seg.means)
        eps = rng.standard_normal(d) * scale
        if spec.noise_kind == "student-t":
            eps = rng.standard_t(spec.noise_dof, size=d) * scale
        elif spec.t_noise_stream is not None:
            j = spec.t_noise_stream
            eps[j] = rng.standard_t(spec.noise_dof) * scale[j]
        if spec.outlier_frac > 0.0:
            hit = rng.random(d) < spec.outlier_frac
            if np.any(hit):
                shock = rng.standard_t(spec.outlier_dof, size=d)
                eps = np.where(hit, shock * spec.outlier_scale * scale, eps)
        y[lag + t - 1] = row + eps
    return y[lag:], list(spec.cp_times)


def write_stream(path: Path, y: np.ndarray, cps: List[int]):
    """Write the stream CSV plus the `<stem>.cps.csv` ground-truth sidecar."""
    path = Path(path)
    d = y.shape[1]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"y{j + 1}" for j in range(d)])
        for t, row in enumerate(y, start=1):
            writer.writerow([t] + [repr(float(v)) for v in row])
    sidecar = path.with_suffix(".cps.csv")
    with sidecar.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cp_time"])
        for c in cps:
            writer.writerow([c])


def lagged_design(history: np.ndarray, t_index: int, lag: int,
                  include_intercept: bool) -> np.ndarray:
    """Design matrix for observation ``t_index`` (0-based row of history).

    Stream j's lagged values occupy columns [j*lag, (j+1)*lag); the shared
    intercept column of ones comes last.  Missing history is zero-padded.
    """
    d = history.shape[1]
    p = d * lag + (1 if include_intercept else 0)
    x = np.zeros((d, p))
    for k in range(lag):
        src = t_index - 1 - k
        if src < 0:
            continue
        for j in range(d):
            x[j, j * lag + k] = history[src, j]
    if include_intercept:
        x[:, -1] = 1.0
    return x
