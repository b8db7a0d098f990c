"""Command-line front end: detection runs, synthetic streams, bound checks
and divergence-parameter initialization.

Subcommands
-----------
run          stream a CSV through the detector, emit plot-ready outputs
simulate     generate a synthetic piecewise-AR stream with CP ground truth
check-bound  tabulate the single-outlier robustness bound over |V|_min
tune-init    influence-matched initialization of the posterior robustness

Exit codes: 0 ok, 1 usage error, 2 data error, 3 numeric domain error.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import yaml

from .betatune import InfluenceProbe, LossSpec, OnlineBetaTuner, influence_curve, init_beta_p
from .blr import NigParams
from .core import BetaState, DataError, HazardSpec, NumericDomainError, TimeStep
from .detector import Detector, ModelSpec, check_cp_bound
from .simulate import SegmentSpec, SimSpec, lagged_design, simulate, write_stream
from .svrg import SvrgHyper


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class ModelConfig:
    id: str
    lag: int = 0
    intercept: bool = True
    a0: float = 1.0
    b0: float = 2.0
    mu0: object = 0.0          # scalar or list, broadcast to p
    sigma0_diag: object = 1.0  # scalar or list, broadcast to p
    beta_p: Optional[float] = None

    def build(self, d: int) -> ModelSpec:
        p = d * self.lag + (1 if self.intercept else 0)
        if p < 1:
            raise UsageError(f"model {self.id!r} has no regressors (lag 0, no intercept)")
        mu = np.broadcast_to(np.atleast_1d(np.asarray(self.mu0, dtype=float)), (p,)).copy()
        diag = np.broadcast_to(np.atleast_1d(np.asarray(self.sigma0_diag, dtype=float)), (p,))
        prior = NigParams(a=self.a0, b=self.b0, mu=mu,
                          prec_chol=np.diag(1.0 / np.sqrt(diag)))
        return ModelSpec(id=self.id, prior=prior, lag=self.lag,
                         include_intercept=self.intercept, beta_p=self.beta_p)


@dataclass
class RunConfig:
    input: Optional[str] = None
    columns: Optional[List[str]] = None
    out_dir: str = "out"
    seed: int = 0
    workers: int = 0
    hazard_lambda: float = 100.0
    prune_k: int = 50
    beta_rlm: float = 0.1
    beta_p: float = 0.05
    beta_init: str = "fixed"  # fixed | auto
    tuning_enabled: bool = False
    tuning_clip_rlm: Optional[float] = None  # default 5/T once T is known
    tuning_clip_p: float = 0.1
    tuning_tau_loss: float = math.inf
    tuning_fd_step: float = 0.1
    svrg: SvrgHyper = field(default_factory=SvrgHyper)
    models: List[ModelConfig] = field(default_factory=lambda: [ModelConfig(id="m0")])


PRESETS: Dict[str, dict] = {
    "well-log": {
        "hazard_lambda": 100.0,
        "prune_k": 50,
        "beta_rlm": 1e-4,
        "beta_p": 0.05,
        "svrg": {"window": 360, "anchor_batch": 25, "inner_batch": 10,
                 "refresh_every": 20, "inner_steps": 1, "step_size": 1e-3},
        "models": [{"id": "level", "lag": 0, "intercept": True,
                    "a0": 1.0, "b0": 1e7, "mu0": 1.15e4, "sigma0_diag": 0.25}],
    },
    "fig1b": {
        "hazard_lambda": 100.0,
        "prune_k": 50,
        "beta_rlm": 0.15,
        "beta_p": 0.05,
        "svrg": {"window": 100, "anchor_batch": 25, "inner_batch": 10,
                 "refresh_every": 20, "inner_steps": 1, "step_size": 1e-3},
        "models": [{"id": "ar1", "lag": 1, "intercept": True,
                    "a0": 3.0, "b0": 5.0, "mu0": 0.0,
                    "sigma0_diag": [5.0, 5.0, 5.0, 5.0, 5.0, 100.0]}],
    },
    "air-pollution-like": {
        "hazard_lambda": 1000.0,
        "prune_k": 50,
        "beta_rlm": 0.1,
        "beta_p": 0.005,
        "svrg": {"window": 300, "anchor_batch": 20, "inner_batch": 10,
                 "refresh_every": 50, "inner_steps": 25, "step_size": 1e-3},
        "models": [{"id": "var1", "lag": 1, "intercept": True,
                    "a0": 1.0, "b0": 25.0, "mu0": 0.0, "sigma0_diag": 20.0}],
    },
}


def _coerce(value: str):
    text = value.strip()
    for caster in (int, float):
        try:
            return caster(text)
        except ValueError:
            pass
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def _apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise UsageError(f"cannot override scalar {part!r} with a section")
        node[parts[-1]] = _coerce(value)
    return raw


def load_run_config(config_path: Optional[str], preset: Optional[str],
                    overrides: Sequence[str]) -> RunConfig:
    raw: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise UsageError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        raw.update(yaml.safe_load(yaml.safe_dump(PRESETS[preset])))
    if config_path is not None:
        with open(config_path) as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise UsageError("config file must contain a mapping")
        raw.update(loaded)
    raw = _apply_overrides(raw, overrides)

    svrg_kwargs = raw.pop("svrg", {})
    model_dicts = raw.pop("models", None)
    tuning = raw.pop("tuning", {})
    cfg = RunConfig()
    for key, value in raw.items():
        if not hasattr(cfg, key):
            raise UsageError(f"unknown config key {key!r}")
        setattr(cfg, key, value)
    for key, value in (tuning or {}).items():
        attr = f"tuning_{key}"
        if not hasattr(cfg, attr):
            raise UsageError(f"unknown tuning key {key!r}")
        setattr(cfg, attr, value)
    cfg.svrg = SvrgHyper(**svrg_kwargs)
    if model_dicts is not None:
        cfg.models = [ModelConfig(**md) for md in model_dicts]
    if cfg.beta_init not in ("fixed", "auto"):
        raise UsageError("beta_init must be 'fixed' or 'auto'")
    return cfg


# ---------------------------------------------------------------------------
# CSV input
# ---------------------------------------------------------------------------


def read_stream(path: str, columns: Optional[List[str]]) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, no header") from None
        header = [h.strip() for h in header]
        if columns is None:
            use = [name for name in header if name != "t"]
        else:
            use = list(columns)
        try:
            idx = [header.index(name) for name in use]
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{path}: line {lineno}: expected {len(header)} cells, "
                                f"got {len(row)}")
            vals = []
            for j, name in zip(idx, use):
                try:
                    v = float(row[j])
                except ValueError:
                    raise DataError(f"{path}: line {lineno}: column {name!r}: "
                                    f"not a number: {row[j]!r}") from None
                if math.isnan(v):
                    raise DataError(f"{path}: line {lineno}: column {name!r}: NaN cell")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no observations after the header")
    return np.asarray(rows, dtype=float)


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def build_detector(cfg: RunConfig, d: int, beta_rlm: float, beta_p: float,
                   track_rlm: bool) -> Detector:
    models = [mc.build(d) for mc in cfg.models]
    beta = BetaState(beta_rlm=beta_rlm, beta_p=beta_p,
                     clip_rlm=cfg.tuning_clip_rlm or 1.0, clip_p=cfg.tuning_clip_p)
    return Detector(models=models, hazard=HazardSpec(lam=cfg.hazard_lambda),
                    hyper=cfg.svrg, beta=beta, prune_k=cfg.prune_k,
                    seed=cfg.seed, workers=cfg.workers,
                    track_rlm_derivative=track_rlm)


def probe_design(mc: ModelConfig, d: int) -> np.ndarray:
    """Unit-history design used by the influence probe (all lags at 1)."""
    history = np.ones((max(mc.lag, 1), d))
    return lagged_design(history, max(mc.lag, 1), mc.lag, mc.intercept)


def cmd_run(cfg: RunConfig) -> int:
    if cfg.input is None:
        raise UsageError("run requires an input CSV (--input or config key 'input')")
    y = read_stream(cfg.input, cfg.columns)
    t_total, d = y.shape
    if cfg.tuning_clip_rlm is None:
        cfg.tuning_clip_rlm = 5.0 / t_total

    beta_p = cfg.beta_p
    if cfg.beta_init == "auto":
        first = cfg.models[0]
        prior = first.build(d).prior
        beta_p, ok = init_beta_p(prior, probe_design(first, d), d)
        if not ok:
            print(f"warning: influence matching hit the bracket boundary, beta_p={beta_p:g}",
                  file=sys.stderr)

    detector = build_detector(cfg, d, cfg.beta_rlm, beta_p, track_rlm=cfg.tuning_enabled)
    tuner = None
    if cfg.tuning_enabled:
        loss = LossSpec(clip_rlm=cfg.tuning_clip_rlm, clip_p=cfg.tuning_clip_p,
                        tau_loss=cfg.tuning_tau_loss, fd_step=cfg.tuning_fd_step)

        def make_shadow(shadow_beta_p: float) -> Detector:
            return build_detector(cfg, d, cfg.beta_rlm, shadow_beta_p, track_rlm=False)

        tuner = OnlineBetaTuner(detector, loss, make_shadow)

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    models = list(detector.models)
    lag_cache: Dict[tuple, np.ndarray] = {}

    rl_rows, pred_rows, model_rows = [], [], []
    step_times = []
    sq_err_sum = 0.0
    abs_err_sum = 0.0
    for t in range(1, t_total + 1):
        x_by_model = {}
        for mc in cfg.models:
            key = (mc.lag, mc.intercept)
            if key not in lag_cache:
                lag_cache[key] = lagged_design(y, t - 1, mc.lag, mc.intercept)
            x_by_model[mc.id] = lag_cache[key]
        lag_cache.clear()
        ts = TimeStep(t=t, y=y[t - 1], x_by_model=x_by_model)
        tic = time.perf_counter()
        snap = tuner.step(ts) if tuner is not None else detector.step(ts)
        step_times.append(time.perf_counter() - tic)

        sq_err_sum += float(np.sum(snap.prediction_error**2))
        abs_err_sum += float(np.sum(np.abs(snap.prediction_error)))
        rl_marg: Dict[int, float] = {}
        for (r, _m), prob in snap.run_length_posterior.items():
            rl_marg[r] = rl_marg.get(r, 0.0) + prob
        top = sorted(rl_marg.items(), key=lambda kv: kv[1], reverse=True)[:cfg.prune_k + 1]
        r_map = max(rl_marg, key=rl_marg.get)
        cells = [f"{r}:{math.log(prob) if prob > 0 else float('-inf'):.12g}"
                 for r, prob in sorted(top)]
        rl_rows.append([t, r_map] + cells)
        pred_rows.append([t] + [repr(float(v)) for v in snap.prediction]
                         + [repr(float(v)) for v in ts.y]
                         + [repr(float(v)) for v in snap.prediction_error])
        model_rows.append([t] + [repr(float(snap.model_posterior[mid])) for mid in models])

    cps = detector.map_segmentation()

    with (out_dir / "runlength.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "r_map", "posterior_cells"])
        writer.writerows(rl_rows)
    with (out_dir / "segmentation.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cp_time"])
        writer.writerows([[c] for c in cps])
    with (out_dir / "predictions.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"yhat{j+1}" for j in range(d)]
                        + [f"y{j+1}" for j in range(d)] + [f"err{j+1}" for j in range(d)])
        writer.writerows(pred_rows)
    with (out_dir / "posterior_models.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + models)
        writer.writerows(model_rows)
    n_cells = t_total * d
    with (out_dir / "summary.txt").open("w") as fh:
        fh.write(f"observations: {t_total}\n")
        fh.write(f"dimension: {d}\n")
        fh.write(f"mse: {sq_err_sum / n_cells!r}\n")
        fh.write(f"mae: {abs_err_sum / n_cells!r}\n")
        fh.write(f"map_changepoints: {len(cps)}\n")
        fh.write(f"beta_rlm_final: {detector.beta.beta_rlm!r}\n")
        fh.write(f"beta_p_final: {detector.beta.beta_p!r}\n")
        fh.write(f"mean_step_seconds: {float(np.mean(step_times)):.6f}\n")
    return 0


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def make_sim_spec(preset: str, t_total: Optional[int], seed: int) -> SimSpec:
    if preset == "fig1b":
        t = t_total or 600
        if t < 450:
            raise UsageError("fig1b preset needs at least 450 observations")
        rng = np.random.default_rng(12345)
        coefs = [rng.uniform(0.3, 0.6, size=(5, 1)) for _ in range(3)]
        means = [np.array([0.0, 1.0, -1.0, 0.5, -0.5]),
                 np.array([3.0, -2.0, 2.0, -2.5, 2.5]),
                 np.array([-3.0, 2.5, -2.0, 2.0, -2.0])]
        return SimSpec(t_total=t, segments=[SegmentSpec(c, m) for c, m in zip(coefs, means)],
                       cp_times=[200, 400], noise_scale=np.ones(5),
                       noise_kind="gaussian", noise_dof=4.0, t_noise_stream=4, seed=seed)
    if preset == "well-log":
        t = t_total or 4050
        rng = np.random.default_rng(54321)
        n_seg = max(2, t // 450)
        cps = sorted(rng.choice(np.arange(150, t - 100), size=n_seg - 1, replace=False).tolist())
        levels = 1.15e4 + rng.normal(0.0, 2.0e3, size=n_seg)
        segs = [SegmentSpec(np.zeros((1, 1)), np.array([lv])) for lv in levels]
        return SimSpec(t_total=t, segments=segs, cp_times=cps,
                       noise_scale=np.array([2.5e3]), noise_kind="gaussian",
                       outlier_frac=0.01, outlier_dof=1.0, outlier_scale=5.0, seed=seed)
    if preset == "air-pollution-like":
        t = t_total or 365
        rng = np.random.default_rng(777)
        d = 29
        coefs = [rng.uniform(0.2, 0.5, size=(d, 1)) for _ in range(2)]
        means = [np.zeros(d), rng.normal(0.0, 1.0, size=d)]
        return SimSpec(t_total=t, segments=[SegmentSpec(c, m) for c, m in zip(coefs, means)],
                       cp_times=[t // 2], noise_scale=np.ones(d), seed=seed)
    raise UsageError(f"unknown simulate preset {preset!r}")


def cmd_simulate(args) -> int:
    spec = make_sim_spec(args.preset, args.t, args.seed)
    y, cps = simulate(spec)
    write_stream(Path(args.out), y, cps)
    print(f"wrote {y.shape[0]} observations x {y.shape[1]} streams to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# check-bound
# ---------------------------------------------------------------------------


def cmd_check_bound(args) -> int:
    diag = np.asarray([float(v) for v in args.sigma0.split(",")], dtype=float)
    p = args.p
    diag = np.broadcast_to(diag, (p,)) if diag.size in (1, p) else None
    if diag is None:
        raise UsageError("sigma0 must have 1 or p entries")
    prior = NigParams(a=args.a0, b=args.b0, mu=np.zeros(p),
                      prec_chol=np.diag(1.0 / np.sqrt(diag)))
    hazard = HazardSpec(lam=args.lam)
    vmins = np.geomspace(args.vmin_lo, args.vmin_hi, args.vmin_n)
    writer = csv.writer(sys.stdout)
    writer.writerow(["v_min", "bound_value", "holds"])
    for v in vmins:
        holds, value = check_cp_bound(prior, p, args.beta_rlm, hazard, float(v))
        writer.writerow([repr(float(v)), repr(float(value)), int(holds)])
    return 0


# ---------------------------------------------------------------------------
# tune-init
# ---------------------------------------------------------------------------


def cmd_tune_init(args) -> int:
    cfg = load_run_config(args.config, args.preset, args.set or [])
    d = args.d
    mc = cfg.models[0]
    prior = mc.build(d).prior
    probe = InfluenceProbe.default(d) if args.target_md is None else InfluenceProbe(
        target_md=args.target_md,
        grid=np.linspace(args.target_md / 10, 3 * args.target_md, 40))
    x_model = probe_design(mc, d)
    beta_p, ok = init_beta_p(prior, x_model, d, probe)
    curve = influence_curve(beta_p, prior, x_model, probe)
    writer = csv.writer(sys.stdout)
    writer.writerow(["md", "influence"])
    for md, val in zip(probe.grid, curve):
        writer.writerow([repr(float(md)), repr(float(val))])
    print(f"beta_p: {beta_p!r}")
    if not ok:
        print("warning: no interior solution; returned bracket boundary", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robocpd", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="stream a CSV through the detector")
    p_run.add_argument("--config", help="YAML config file")
    p_run.add_argument("--preset", choices=sorted(PRESETS))
    p_run.add_argument("--input", help="input CSV path")
    p_run.add_argument("--out-dir", help="output directory")
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--workers", type=int)
    p_run.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config key (dotted for sections)")

    p_sim = sub.add_parser("simulate", help="generate a synthetic stream")
    p_sim.add_argument("--preset", required=True,
                       choices=["fig1b", "well-log", "air-pollution-like"])
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--t", type=int, help="stream length override")
    p_sim.add_argument("--seed", type=int, default=0)

    p_bound = sub.add_parser("check-bound", help="tabulate the robustness bound")
    p_bound.add_argument("--p", type=int, required=True)
    p_bound.add_argument("--a0", type=float, required=True)
    p_bound.add_argument("--b0", type=float, required=True)
    p_bound.add_argument("--sigma0", default="1.0", help="comma-separated prior diag")
    p_bound.add_argument("--lam", type=float, required=True)
    p_bound.add_argument("--beta-rlm", type=float, required=True)
    p_bound.add_argument("--vmin-lo", type=float, default=1e-8)
    p_bound.add_argument("--vmin-hi", type=float, default=1e-3)
    p_bound.add_argument("--vmin-n", type=int, default=50)

    p_tune = sub.add_parser("tune-init", help="initialize beta_p by influence matching")
    p_tune.add_argument("--config")
    p_tune.add_argument("--preset", choices=sorted(PRESETS))
    p_tune.add_argument("--d", type=int, required=True)
    p_tune.add_argument("--target-md", type=float)
    p_tune.add_argument("--set", action="append", metavar="KEY=VALUE")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        if args.command == "run":
            overrides = list(args.set or [])
            if args.input:
                overrides.append(f"input={args.input}")
            if args.out_dir:
                overrides.append(f"out_dir={args.out_dir}")
            if args.seed is not None:
                overrides.append(f"seed={args.seed}")
            if args.workers is not None:
                overrides.append(f"workers={args.workers}")
            cfg = load_run_config(args.config, args.preset, overrides)
            return cmd_run(cfg)
        if args.command == "simulate":
            return cmd_simulate(args)
        if args.command == "check-bound":
            return cmd_check_bound(args)
        if args.command == "tune-init":
            return cmd_tune_init(args)
        raise UsageError(f"unknown command {args.command!r}")
    except (UsageError, ValueError, FileNotFoundError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericDomainError as exc:
        print(f"numeric domain error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
