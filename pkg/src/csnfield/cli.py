"""Command-line driver: simulate / orthant / estimate / invert.

Every subcommand resolves its parameters from defaults, then an optional
config file with flat dotted keys, then repeated --set key=value pairs,
then dedicated flags.  The fully resolved configuration is echoed into a
JSON manifest next to the outputs, and a manifest can be fed back via
--config to replay a run exactly.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
from scipy.special import ndtri

from . import field as field_mod
from . import inversion as inv_mod
from . import mle as mle_mod
from .errors import (
    ConditioningDegenerateError,
    DataFormatError,
    DesignMismatchError,
    NotPositiveSemidefiniteError,
    NumericalDegeneracyError,
    OptimizationFailureError,
)
from .gaussian import GridSpec, cholesky
from .orthant import OrthantProblem, estimate_orthant, make_crn

__all__ = ["main"]


class UsageError(ValueError):
    pass


# ----------------------------------------------------------------- config


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw.strip()


def _load_config_file(path: str) -> dict:
    text = Path(path).read_text()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        obj = json.loads(text)
        return obj.get("config", obj)
    cfg = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        for sep in ("=", ":"):
            if sep in line:
                key, _, val = line.partition(sep)
                cfg[key.strip()] = _parse_value(val)
                break
        else:
            raise DataFormatError(f"{path}: line {lineno}: expected key = value")
    return cfg


def _resolve(defaults: dict, args, keys_from_flags: dict) -> dict:
    cfg = dict(defaults)
    if getattr(args, "config", None):
        try:
            file_cfg = _load_config_file(args.config)
        except FileNotFoundError as exc:
            raise DataFormatError(f"config file not found: {args.config}") from exc
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    for pair in getattr(args, "set", None) or []:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, _, val = pair.partition("=")
        key = key.strip()
        if key not in defaults:
            raise UsageError(f"unknown config key {key!r}")
        cfg[key] = _parse_value(val)
    for key, flag_attr in keys_from_flags.items():
        val = getattr(args, flag_attr, None)
        if val is not None:
            cfg[key] = val
    return cfg


def _parse_grid(spec, spacing: float = 1.0) -> GridSpec:
    try:
        if isinstance(spec, str):
            rows, cols = spec.lower().split("x")
        else:
            rows, cols = spec
        return GridSpec(
            n_rows=int(rows), n_cols=int(cols), spacing_v=spacing, spacing_h=spacing
        )
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad grid spec {spec!r}; expected ROWSxCOLS") from exc


def _float_list(spec) -> list[float]:
    if isinstance(spec, (list, tuple)):
        return [float(v) for v in spec]
    return [float(tok) for tok in str(spec).split(",") if tok.strip()]


def _write_manifest(path: Path, subcommand: str, cfg: dict, extra: dict) -> None:
    payload = {"subcommand": subcommand, "config": cfg}
    payload.update(extra)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


# ----------------------------------------------------------------- simulate

_SIM_DEFAULTS = {
    "case": None,
    "mu": None, "nu": None, "sigma2": None, "gamma": None, "d_h": None, "d_v": None,
    "grid": "50x50",
    "spacing": 1.0,
    "seed": 1,
    "realizations": 1,
    "n_a": None, "max_sets": None, "burn_in": None, "n_iter": None,
    "hist_bins": 40,
    "out": ".",
}


def _params_from_cfg(cfg) -> field_mod.CsnParams:
    if cfg["case"] is not None:
        try:
            params = field_mod.case_params(int(cfg["case"]))
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        overrides = {
            k: cfg[k] for k in ("mu", "nu", "sigma2", "gamma", "d_h", "d_v")
            if cfg[k] is not None
        }
        if overrides:
            vals = {
                "mu": params.mu, "nu": params.nu, "sigma2": params.sigma2,
                "gamma": params.gamma, "d_h": params.d_h, "d_v": params.d_v,
            }
            vals.update(overrides)
            params = field_mod.CsnParams(**vals)
        return params
    needed = ("mu", "nu", "sigma2", "gamma", "d_h", "d_v")
    if any(cfg[k] is None for k in needed):
        raise UsageError("either case or all of mu,nu,sigma2,gamma,d_h,d_v are required")
    return field_mod.CsnParams(**{k: float(cfg[k]) for k in needed})


def cmd_simulate(args) -> int:
    cfg = _resolve(
        _SIM_DEFAULTS, args,
        {"case": "case", "grid": "grid", "seed": "seed", "out": "out",
         "realizations": "realizations"},
    )
    t0 = time.perf_counter()
    params = _params_from_cfg(cfg)
    grid = _parse_grid(cfg["grid"], float(cfg["spacing"]))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    model = field_mod.build_model(params, grid)
    chain = field_mod.ChainConfig(
        n_a=cfg["n_a"], max_sets=cfg["max_sets"],
        burn_in=cfg["burn_in"], n_iter=cfg["n_iter"],
    )
    n_real = int(cfg["realizations"])
    reals = [
        field_mod.simulate_field(model, seed=int(cfg["seed"]) + i, config=chain)
        for i in range(n_real)
    ]
    first = reals[0]
    rows_idx, cols_idx = grid.rows_cols()
    _write_csv(
        out / "realization.csv",
        ["row", "col", "value"],
        (
            (int(rows_idx[s]), int(cols_idx[s]), float(first.values[s]))
            for s in range(grid.p)
        ),
    )
    (out / "realization.json").write_text(
        json.dumps(
            {
                "grid": {
                    "n_rows": grid.n_rows, "n_cols": grid.n_cols,
                    "spacing_v": grid.spacing_v, "spacing_h": grid.spacing_h,
                },
                "seed": first.seed,
                "chain_meta": first.chain_meta,
                "values": [repr(float(v)) for v in first.values],
            },
            indent=1,
        )
        + "\n"
    )

    interior = grid.interior_sites()
    pooled = np.concatenate([r.values[interior] for r in reals])
    counts, edges = np.histogram(pooled, bins=int(cfg["hist_bins"]), density=True)
    _write_csv(
        out / "marginal_hist.csv",
        ["bin_left", "bin_right", "density"],
        ((float(edges[i]), float(edges[i + 1]), float(counts[i])) for i in range(len(counts))),
    )
    k = min(200, pooled.size)
    probs = (np.arange(k) + 0.5) / k
    _write_csv(
        out / "qq_normal.csv",
        ["normal_quantile", "sample_quantile"],
        zip(ndtri(probs).astype(float), np.quantile(pooled, probs).astype(float)),
    )
    meta = {
        "dims": {"p": grid.p, "realizations": n_real},
        "seeds": {"base": int(cfg["seed"])},
        "acceptance_rate": first.chain_meta.get("acceptance_rate"),
        "runtimes": {"total_s": time.perf_counter() - t0},
    }
    _write_manifest(out / "simulate_manifest.json", "simulate", cfg, meta)
    print(
        f"simulate: wrote {grid.p}-site realization"
        f" (acceptance rate {first.chain_meta.get('acceptance_rate')})"
    )
    return 0


# ----------------------------------------------------------------- orthant

_ORTHANT_DEFAULTS = {
    "dim": None,
    "structure": "identity",   # identity | equicorr | exp1d
    "rho": 0.5,
    "range": 3.0,
    "mean": 0.0,
    "n_mc": 10000,
    "seed": 1,
    "shift": "auto",           # auto | none | numeric magnitude
    "oracle": False,
    "out": None,
}


def _orthant_cov(cfg) -> np.ndarray:
    n = int(cfg["dim"])
    structure = str(cfg["structure"])
    if structure == "identity":
        return np.eye(n)
    if structure == "equicorr":
        rho = float(cfg["rho"])
        return (1 - rho) * np.eye(n) + rho * np.ones((n, n))
    if structure == "exp1d":
        from .gaussian import axis_correlation

        return axis_correlation(n, 1.0, float(cfg["range"]))
    raise UsageError(f"unknown structure {structure!r}")


def cmd_orthant(args) -> int:
    cfg = _resolve(
        _ORTHANT_DEFAULTS, args,
        {"dim": "dim", "n_mc": "n_mc", "seed": "seed", "structure": "structure",
         "oracle": "oracle"},
    )
    if cfg["dim"] is None:
        raise UsageError("dim is required")
    if int(cfg["dim"]) < 1:
        raise UsageError("dim must be >= 1")
    n = int(cfg["dim"])
    cov = _orthant_cov(cfg)
    mean = np.full(n, float(cfg["mean"]))
    shift_cfg = cfg["shift"]
    if shift_cfg == "none":
        problem = OrthantProblem.from_cov(mean, cov, shift=np.zeros(n))
    elif shift_cfg == "auto":
        problem = OrthantProblem.from_cov(mean, cov)
    else:
        problem = OrthantProblem.from_cov(mean, cov, shift_magnitude=float(shift_cfg))
    crn = make_crn(int(cfg["seed"]), int(cfg["n_mc"]), n)
    t0 = time.perf_counter()
    est = estimate_orthant(problem, crn)
    dt = time.perf_counter() - t0
    print(f"orthant: estimate {est.value:.6g} (log {est.log_value:.6f})")
    print(f"orthant: std error {est.std_error:.3g} (relative {est.rel_std_error:.3g})")
    print(f"orthant: N = {est.n_used}, runtime {dt:.3f} s")
    if cfg["oracle"]:
        if n > 6:
            raise UsageError("oracle comparison only supported for dim <= 6")
        from scipy.stats import multivariate_normal

        oracle = float(
            multivariate_normal(mean=mean, cov=cov, allow_singular=True).cdf(np.zeros(n))
        )
        se = max(est.std_error, 1e-300)
        z = (est.value - oracle) / se
        print(f"orthant: oracle {oracle:.6g}, z-score {z:.2f}")
    return 0


# ----------------------------------------------------------------- estimate

_EST_DEFAULTS = {
    "input": None,
    "case": 1,
    "grid": "30x30",
    "sim_seed": 7,
    "n_mc": 1000,
    "n_starts": 4,
    "simplex_iters": 150,
    "newton_iters": 25,
    "crn_seed": 20240801,
    "study": None,           # mc-error | consistency
    "N_list": "100,1000",
    "reps": 8,
    "p_list": "25,100,225",
    "n_sims": 50,
    "seed": 1234,
    "out": ".",
}


def _load_realization(path: str) -> field_mod.FieldRealization:
    p = Path(path)
    if not p.exists():
        raise DataFormatError(f"input file not found: {path}")
    if p.suffix == ".json":
        obj = json.loads(p.read_text())
        g = obj["grid"]
        grid = GridSpec(
            n_rows=int(g["n_rows"]), n_cols=int(g["n_cols"]),
            spacing_v=float(g.get("spacing_v", 1.0)), spacing_h=float(g.get("spacing_h", 1.0)),
        )
        values = np.array([float(v) for v in obj["values"]])
        return field_mod.FieldRealization(
            grid=grid, values=values, seed=int(obj.get("seed", 0)),
            chain_meta=obj.get("chain_meta", {}),
        )
    rows = []
    with p.open() as fh:
        header = fh.readline()
        if header.strip() != "row,col,value":
            raise DataFormatError(f"{path}: line 1: expected header row,col,value")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                r, c, v = line.strip().split(",")
                rows.append((int(r), int(c), float(v)))
            except ValueError as exc:
                raise DataFormatError(f"{path}: line {lineno}: bad row {line!r}") from exc
    n_rows = max(r for r, _, _ in rows) + 1
    n_cols = max(c for _, c, _ in rows) + 1
    grid = GridSpec(n_rows=n_rows, n_cols=n_cols)
    values = np.full(grid.p, np.nan)
    for r, c, v in rows:
        values[grid.site_index(r, c)] = v
    if np.isnan(values).any():
        raise DataFormatError(f"{path}: fewer rows than grid cells")
    return field_mod.FieldRealization(grid=grid, values=values, seed=0, chain_meta={})


def cmd_estimate(args) -> int:
    cfg = _resolve(
        _EST_DEFAULTS, args,
        {"input": "input", "study": "study", "n_mc": "n_mc", "seed": "seed",
         "out": "out", "grid": "grid", "reps": "reps", "n_sims": "n_sims",
         "N_list": "N_list", "p_list": "p_list"},
    )
    t0 = time.perf_counter()
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    if cfg["input"] is not None:
        realization = _load_realization(str(cfg["input"]))
    else:
        params = field_mod.case_params(int(cfg["case"]))
        grid = _parse_grid(cfg["grid"])
        model = field_mod.build_model(params, grid)
        realization = field_mod.simulate_field(model, seed=int(cfg["sim_seed"]))
    mcfg = mle_mod.MleConfig(
        n_mc=int(cfg["n_mc"]), n_starts=int(cfg["n_starts"]),
        simplex_iters=int(cfg["simplex_iters"]), newton_iters=int(cfg["newton_iters"]),
        crn_seed=int(cfg["crn_seed"]),
    )
    extra: dict = {"dims": {"p": realization.grid.p}}

    study = cfg["study"]
    if study is None:
        res = mle_mod.fit(realization, mcfg)
        payload = {
            "estimates": res.estimates,
            "std_errors": dict(zip(mle_mod.PARAM_NAMES, map(float, res.std_errors))),
            "intervals_90": {
                n: [float(res.intervals_90[i, 0]), float(res.intervals_90[i, 1])]
                for i, n in enumerate(mle_mod.PARAM_NAMES)
            },
            "loglik": res.loglik,
            "start_used": res.start_used,
            "clamped_gamma": res.clamped_gamma,
        }
        (out / "estimates.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        print("estimate: " + ", ".join(f"{k}={v:.4f}" for k, v in res.estimates.items()))
    elif study == "mc-error":
        rows = mle_mod.mc_error_study(
            realization, _float_list(cfg["N_list"]), int(cfg["reps"]),
            config=mcfg, base_seed=int(cfg["seed"]),
        )
        _write_csv(
            out / "mc_error.csv",
            ["param", "p", "N", "rep", "estimate", "se"],
            ((r["param"], r["p"], r["N"], r["rep"], r["estimate"], r["se"]) for r in rows),
        )
        print(f"estimate: wrote mc-error table ({len(rows)} rows)")
    elif study == "consistency":
        params = field_mod.case_params(int(cfg["case"]))
        summary, raw = mle_mod.consistency_study(
            [int(v) for v in _float_list(cfg["p_list"])],
            int(cfg["n_sims"]), params, n_mc=int(cfg["n_mc"]),
            config=mcfg, seed=int(cfg["seed"]),
        )
        _write_csv(
            out / "consistency.csv",
            ["param", "p", "rep", "estimate", "se", "covered", "clamped"],
            (
                (r["param"], r["p"], r["rep"], r["estimate"], r["se"],
                 int(r["covered"]), int(r["clamped"]))
                for r in raw
            ),
        )
        _write_csv(
            out / "consistency_summary.csv",
            ["param", "p", "bias", "sd", "coverage90", "clamp_fraction"],
            (
                (r["param"], r["p"], r["bias"], r["sd"], r["coverage90"], r["clamp_fraction"])
                for r in summary
            ),
        )
        print(f"estimate: wrote consistency tables ({len(raw)} fits)")
    else:
        raise UsageError(f"unknown study {study!r}")
    extra["runtimes"] = {"total_s": time.perf_counter() - t0}
    _write_manifest(out / "estimate_manifest.json", "estimate", cfg, extra)
    return 0


# ----------------------------------------------------------------- invert

_INV_DEFAULTS = {
    "synth": False,
    "obs": None,
    "well": None,
    "theta_file": None,
    "grid": "25x12",
    "n_vars": 3,
    "angles": "12,22,31",
    "wavelet_freq": 0.1,
    "window": 4,
    "model": None,            # list of csn/gaussian; default ["csn"]
    "fit": False,
    "truth_gamma": "0.975,0.975,-0.975",
    "truth_sigma2_e": 0.05,
    "n_mc": 500,
    "n_samples": 800,
    "seed": 99,
    "with_well": False,
    "eval": False,
    "out": ".",
}


def _default_truth(cfg, n_vars: int) -> inv_mod.HyperParams:
    gammas = _float_list(cfg["truth_gamma"])[:n_vars]
    if len(gammas) < n_vars:
        gammas = gammas + [gammas[-1]] * (n_vars - len(gammas))
    var0 = [0.02, 0.06, 0.01][:n_vars] if n_vars == 3 else [1.0]
    mu0 = [-0.2, -0.5, 0.1][:n_vars] if n_vars == 3 else [0.0]
    return inv_mod.HyperParams(
        sigma2_e=float(cfg["truth_sigma2_e"]),
        d_w_e=0.3, d_h_e=4.0, d_v_e=3.0,
        mu0=np.array(mu0), sigma0=np.diag(var0), gamma_vec=np.array(gammas),
        d_h_m=3.0, d_v_m=2.0,
    )


def cmd_invert(args) -> int:
    cfg = _resolve(
        _INV_DEFAULTS, args,
        {"synth": "synth", "obs": "obs", "well": "well", "grid": "grid",
         "n_vars": "n_vars", "model": "model", "fit": "fit", "seed": "seed",
         "with_well": "with_well", "eval": "eval", "out": "out",
         "n_samples": "n_samples", "n_mc": "n_mc", "theta_file": "theta_file"},
    )
    t0 = time.perf_counter()
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    grid = _parse_grid(cfg["grid"])
    design = inv_mod.InversionDesign(
        grid=grid,
        n_vars=int(cfg["n_vars"]),
        angles_deg=tuple(_float_list(cfg["angles"])),
        wavelet=inv_mod.WaveletSpec(peak_freq=float(cfg["wavelet_freq"])),
        window_traces=int(cfg["window"]),
    )
    models = cfg["model"] or ["csn"]
    if isinstance(models, str):
        models = [models]
    for m in models:
        if m not in ("csn", "gaussian"):
            raise UsageError(f"unknown model {m!r}")

    seed = int(cfg["seed"])
    truth_theta = None
    m_true = None
    if cfg["synth"]:
        truth_theta = _default_truth(cfg, design.n_vars)
        if cfg["theta_file"]:
            truth_theta = inv_mod.HyperParams.from_dict(
                json.loads(Path(cfg["theta_file"]).read_text())
            )
        synth = inv_mod.synth_data(truth_theta, design, seed=seed)
        d, m_w, m_true = synth.d, synth.m_w, synth.m_true
        inv_mod.write_observations(out / "observations.csv", d, design)
        inv_mod.write_well(out / "well.csv", m_w, design)
        _write_csv(
            out / "truth.csv",
            ["index", "value"],
            ((i, float(v)) for i, v in enumerate(m_true)),
        )
    else:
        if cfg["obs"] is None:
            raise UsageError("either --synth or an observation file is required")
        if not Path(str(cfg["obs"])).exists():
            raise DataFormatError(f"observation file not found: {cfg['obs']}")
        d = inv_mod.read_observations(str(cfg["obs"]), design)
        m_w = None
        if cfg["well"]:
            m_w = inv_mod.read_well(str(cfg["well"]), design)

    theta_by_model: dict = {}
    runtimes: dict = {}
    for m in models:
        t_fit = time.perf_counter()
        if cfg["fit"]:
            fitted = inv_mod.fit_hyperparams(
                d, m_w, design,
                inv_mod.HyperFitConfig(
                    n_mc=int(cfg["n_mc"]), crn_seed=seed + 1, gaussian=(m == "gaussian"),
                ),
            )
        else:
            if cfg["theta_file"]:
                theta = inv_mod.HyperParams.from_dict(
                    json.loads(Path(cfg["theta_file"]).read_text())
                )
            elif truth_theta is not None:
                theta = truth_theta
            else:
                raise UsageError("without --fit, a theta file (or --synth truth) is required")
            if m == "gaussian":
                theta = inv_mod.HyperParams.from_dict(
                    {**theta.to_dict(), "gamma_vec": [0.0] * design.n_vars}
                )
            fitted = inv_mod.FittedHyper(
                params=theta, loglik=float("nan"), design_token=design.token,
                gaussian=(m == "gaussian"), n_evals=0,
            )
        runtimes[f"fit_{m}_s"] = time.perf_counter() - t_fit
        theta_by_model[m] = fitted

    metrics_rows = []
    for m in models:
        fitted = theta_by_model[m]
        t_pred = time.perf_counter()
        prior = fitted.params.prior(design)
        if m == "gaussian":
            obs_model = inv_mod.LinearObsModel.build(design, fitted.params, d=d)
            pred = inv_mod.gauss_linear_posterior(prior, obs_model)
        else:
            posterior = inv_mod.posterior_from_fit(fitted, design, d)
            if cfg["with_well"]:
                if m_w is None:
                    raise UsageError("--with-well requires well data")
                posterior = inv_mod.condition_on_well(posterior, m_w, design.well_indices())
            pred = inv_mod.predict(
                posterior, n_samples=int(cfg["n_samples"]), seed=seed + 7
            )
        runtimes[f"predict_{m}_s"] = time.perf_counter() - t_pred
        inv_mod.write_predictions(out / f"predictions_{m}.csv", pred, design)
        if cfg["eval"]:
            if m_true is None:
                raise UsageError("--eval requires --synth (a known truth)")
            bands = inv_mod.prior_quantile_bands(prior, seed=seed + 13)
            for row in inv_mod.evaluate(pred, m_true, bands):
                metrics_rows.append((m, row["variable"], row["mae"],
                                     row.get("prior_coverage", float("nan")),
                                     row["posterior_coverage"]))
    if metrics_rows:
        _write_csv(
            out / "metrics.csv",
            ["model", "variable", "mae", "prior_coverage", "posterior_coverage"],
            metrics_rows,
        )

    extra = {
        "dims": {
            "p": design.dim_field, "obs": design.dim_obs,
            "grid": [grid.n_rows, grid.n_cols], "n_vars": design.n_vars,
        },
        "seeds": {"base": seed},
        "theta": {m: theta_by_model[m].params.to_dict() for m in models},
        "loglik": {m: theta_by_model[m].loglik for m in models},
        "window_traces": design.window_traces,
        "runtimes": {**runtimes, "total_s": time.perf_counter() - t0},
    }
    _write_manifest(out / "invert_manifest.json", "invert", cfg, extra)
    print(f"invert: models {models}, outputs in {out}")
    return 0


# ----------------------------------------------------------------- main


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="csnfield", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="config file (flat key = value, or a manifest JSON)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None,
                       help="worker cap (recorded; engines are sequential)")
        p.add_argument("--out", default=None)

    ps = sub.add_parser("simulate", help="draw field realizations and marginal summaries")
    common(ps)
    ps.add_argument("--case", type=int, default=None)
    ps.add_argument("--grid", default=None)
    ps.add_argument("--realizations", type=int, default=None)
    ps.set_defaults(func=cmd_simulate)

    po = sub.add_parser("orthant", help="benchmark the orthant probability estimator")
    common(po)
    po.add_argument("--dim", type=int, default=None)
    po.add_argument("--structure", default=None)
    po.add_argument("--n-mc", dest="n_mc", type=int, default=None)
    po.add_argument("--oracle", action="store_const", const=True, default=None)
    po.set_defaults(func=cmd_orthant)

    pe = sub.add_parser("estimate", help="fit parameters or run the estimation studies")
    common(pe)
    pe.add_argument("--input", default=None)
    pe.add_argument("--grid", default=None)
    pe.add_argument("--study", default=None)
    pe.add_argument("--n-mc", dest="n_mc", type=int, default=None)
    pe.add_argument("--N", dest="N_list", default=None)
    pe.add_argument("--reps", type=int, default=None)
    pe.add_argument("--p-list", dest="p_list", default=None)
    pe.add_argument("--n-sims", dest="n_sims", type=int, default=None)
    pe.set_defaults(func=cmd_estimate)

    pi = sub.add_parser("invert", help="Bayesian inversion of (synthetic) observations")
    common(pi)
    pi.add_argument("--synth", action="store_const", const=True, default=None)
    pi.add_argument("--obs", default=None)
    pi.add_argument("--well", default=None)
    pi.add_argument("--theta-file", dest="theta_file", default=None)
    pi.add_argument("--grid", default=None)
    pi.add_argument("--n-vars", dest="n_vars", type=int, default=None)
    pi.add_argument("--model", action="append", default=None)
    pi.add_argument("--fit", action="store_const", const=True, default=None)
    pi.add_argument("--n-mc", dest="n_mc", type=int, default=None)
    pi.add_argument("--n-samples", dest="n_samples", type=int, default=None)
    pi.add_argument("--with-well", dest="with_well", action="store_const", const=True, default=None)
    pi.add_argument("--eval", action="store_const", const=True, default=None)
    pi.set_defaults(func=cmd_invert)
    return ap


def main(argv=None) -> int:
    ap = _build_parser()
    args = ap.parse_args(argv)
    if args.threads is not None and args.threads < 1:
        ap.error("--threads must be >= 1")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DesignMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (
        NotPositiveSemidefiniteError,
        ConditioningDegenerateError,
        NumericalDegeneracyError,
        OptimizationFailureError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
