"""Monte Carlo maximum likelihood for the isotropic field parameters.

The log-likelihood of one realization splits into an exact Gaussian
term, exact univariate cdf terms, and one orthant probability of
dimension p, which is the only Monte Carlo piece.  Reusing a single
uniform stream (common random numbers) across evaluations makes the
approximated likelihood a smooth deterministic function of the
parameters, so standard optimizers apply.

The orthant term depends only on (gamma, d), never on (mu, sigma2), and
is cached on those two coordinates; finite-difference sweeps over the
location/scale parameters therefore reuse it for free.

Optimization runs in transformed coordinates (mu raw, log sigma2,
atanh gamma, log d) to keep the boundary pathologies of the raw
parameterization away from the Newton phase.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from math import atanh, exp, log, sqrt, tanh

import numpy as np
from scipy.linalg import cho_solve

from ._optim import central_hessian, two_phase_minimize
from .errors import NotPositiveSemidefiniteError, OptimizationFailureError
from .field import GAMMA_CLAMP, ChainConfig, CsnParams, FieldRealization, build_model, simulate_field
from .gaussian import GridSpec, LOG_2PI, axis_correlation, cholesky, norm_logcdf
from .orthant import CrnStream, OrthantProblem, default_shift, estimate_orthant, make_crn

__all__ = [
    "PARAM_NAMES",
    "MleConfig",
    "MleResult",
    "mc_loglik",
    "fit",
    "gaussian_profile_mle",
    "mc_error_study",
    "consistency_study",
]

PARAM_NAMES = ("mu", "sigma2", "gamma", "d")

_Z90 = 1.6448536269514722  # one-sided 95% normal quantile
_CLAMP_FLAG_THRESHOLD = 1.0 - 1e-5


@dataclass(frozen=True)
class MleConfig:
    n_mc: int = 1000
    n_starts: int = 4
    start_box: dict | None = None
    simplex_iters: int = 150
    newton_iters: int = 25
    crn_seed: int = 20240801
    fix_nu_zero: bool = True
    fixed: dict | None = None       # e.g. {"gamma": 0.0, "d": 3.0}


@dataclass
class MleResult:
    estimates: dict
    loglik: float
    hessian: np.ndarray
    std_errors: np.ndarray
    intervals_90: np.ndarray        # rows (low, high) in PARAM_NAMES order
    start_used: int
    clamped_gamma: bool
    n_evals: int = 0
    diagnostics: list = dc_field(default_factory=list)


class LoglikEvaluator:
    """Caches the per-(gamma, d) orthant term and axis factors for one grid."""

    def __init__(self, realization: FieldRealization, crn: CrnStream, nu: float = 0.0):
        self.grid = realization.grid
        self.x = np.asarray(realization.values, dtype=float)
        self.crn = crn
        self.nu = nu
        if crn.dim != self.grid.p:
            raise ValueError("CRN stream dimension must equal the grid size")
        self._axis_cache: dict[float, tuple] = {}
        self._orthant_cache: dict[tuple, float] = {}
        self.last_orthant = None

    def _axes(self, d: float):
        hit = self._axis_cache.get(d)
        if hit is None:
            g = self.grid
            c_h = axis_correlation(g.n_cols, g.spacing_h, d)
            c_v = axis_correlation(g.n_rows, g.spacing_v, d)
            ch_h = cholesky(c_h)
            ch_v = cholesky(c_v)
            logdet = g.n_rows * ch_h.logdet + g.n_cols * ch_v.logdet
            hit = (c_h, c_v, ch_h, ch_v, logdet)
            if len(self._axis_cache) > 64:
                self._axis_cache.clear()
            self._axis_cache[d] = hit
        return hit

    def _log_orthant(self, gamma: float, d: float, c_h, c_v) -> float:
        key = (gamma, d, self.nu)
        hit = self._orthant_cache.get(key)
        if hit is None:
            p = self.grid.p
            corr = np.kron(c_h, c_v)
            latent = (1.0 - gamma * gamma) * np.eye(p) + (gamma * gamma) * corr
            problem = OrthantProblem(
                mean=np.full(p, self.nu),
                chol=cholesky(latent),
                shift=default_shift(latent),
            )
            est = estimate_orthant(problem, self.crn)
            self.last_orthant = est
            hit = est.log_value
            if len(self._orthant_cache) > 256:
                self._orthant_cache.clear()
            self._orthant_cache[key] = hit
        return hit

    def loglik(self, mu: float, sigma2: float, gamma: float, d: float) -> float:
        """Monte Carlo log-likelihood; -inf on infeasible parameters."""
        if sigma2 <= 0 or d < 0 or abs(gamma) >= 1.0:
            return -np.inf
        g = self.grid
        try:
            c_h, c_v, ch_h, ch_v, logdet_c = self._axes(d)
            r = (self.x - mu).reshape(g.n_cols, g.n_rows)
            y = cho_solve((ch_h.lower, True), cho_solve((ch_v.lower, True), r.T).T)
            quad = float(np.sum(r * y))
            ll = -0.5 * (g.p * (LOG_2PI + log(sigma2)) + logdet_c + quad / sigma2)
            if gamma == 0.0 and self.nu == 0.0:
                # cdf terms cancel the orthant normalizer exactly
                return ll
            s2 = 1.0 - gamma * gamma
            sigma = sqrt(sigma2)
            m = self.nu - (gamma / sigma) * (self.x - mu)
            ll += float(np.sum(norm_logcdf(0.0, mean=m, var=s2)))
            ll -= self._log_orthant(gamma, d, c_h, c_v)
            return ll
        except NotPositiveSemidefiniteError:
            return -np.inf


def mc_loglik(params, x: FieldRealization, crn: CrnStream) -> float:
    """Log-likelihood of (mu, sigma2, gamma, d) for one realization.

    Deterministic for a fixed stream; an optional fifth entry frees the
    latent location (default 0).
    """
    params = tuple(float(v) for v in params)
    nu = params[4] if len(params) > 4 else 0.0
    ev = LoglikEvaluator(x, crn, nu=nu)
    return ev.loglik(*params[:4])


def gaussian_profile_mle(x: FieldRealization, d: float) -> tuple[float, float, float]:
    """Closed-form Gaussian MLE of (mu, sigma2) for a fixed range d.

    Returns (mu_hat, sigma2_hat, loglik); the gamma = 0 submodel.
    """
    g = x.grid
    c_h = axis_correlation(g.n_cols, g.spacing_h, d)
    c_v = axis_correlation(g.n_rows, g.spacing_v, d)
    ch_h = cholesky(c_h)
    ch_v = cholesky(c_v)

    def c_inv(vec):
        m = vec.reshape(g.n_cols, g.n_rows)
        return cho_solve((ch_h.lower, True), cho_solve((ch_v.lower, True), m.T).T).reshape(-1)

    ones = np.ones(g.p)
    vals = np.asarray(x.values, dtype=float)
    ci_one = c_inv(ones)
    mu_hat = float(ci_one @ vals) / float(ci_one @ ones)
    r = vals - mu_hat
    sigma2_hat = float(r @ c_inv(r)) / g.p
    logdet_c = g.n_rows * ch_h.logdet + g.n_cols * ch_v.logdet
    ll = -0.5 * (g.p * (LOG_2PI + log(sigma2_hat) + 1.0) + logdet_c)
    return mu_hat, sigma2_hat, ll


# transformed coordinates: mu raw, log sigma2, atanh gamma, log d, (nu raw)


def _to_transformed(names, values):
    out = []
    for n, v in zip(names, values):
        if n == "sigma2" or n == "d":
            out.append(log(v))
        elif n == "gamma":
            out.append(atanh(np.clip(v, -GAMMA_CLAMP, GAMMA_CLAMP)))
        else:
            out.append(v)
    return np.asarray(out, dtype=float)


def _from_transformed(names, t):
    out = []
    for n, v in zip(names, t):
        if n == "sigma2" or n == "d":
            out.append(exp(v))
        elif n == "gamma":
            out.append(tanh(v))
        else:
            out.append(float(v))
    return out


def _default_starts(x_vals: np.ndarray, box: dict | None):
    box = dict(box or {})
    mu_list = box.get("mu", [float(np.mean(x_vals))])
    s2_list = box.get("sigma2", [float(np.var(x_vals, ddof=1))])
    gamma_list = box.get("gamma", [0.8, 0.0, -0.8])
    d_list = box.get("d", [3.0, 1.0, 8.0])
    starts = []
    for mu in mu_list:
        for s2 in s2_list:
            for gam in gamma_list:
                for d in d_list:
                    starts.append({"mu": mu, "sigma2": s2, "gamma": gam, "d": d})
    return starts


def fit(x: FieldRealization, config: MleConfig = MleConfig()) -> MleResult:
    """Multi-start simplex + quasi-Newton fit of (mu, sigma2, gamma, d).

    The Hessian of the log-likelihood is recomputed at the optimum in the
    natural coordinates by central differences; 90% intervals use the
    diagonal of its negated inverse.
    """
    crn = make_crn(config.crn_seed, config.n_mc, x.grid.p)
    nu = 0.0
    fixed = dict(config.fixed or {})
    if not config.fix_nu_zero and "nu" not in fixed:
        names = [n for n in PARAM_NAMES if n not in fixed] + ["nu"]
    else:
        nu = float(fixed.pop("nu", 0.0))
        names = [n for n in PARAM_NAMES if n not in fixed]
    if not names:
        raise ValueError("no free parameters to optimize")

    ev = LoglikEvaluator(x, crn, nu=nu)

    def full_params(free_values):
        d = dict(fixed)
        d.update(zip(names, free_values))
        return d

    def neg_loglik_t(t):
        vals = _from_transformed(names, t)
        d = full_params(vals)
        if "nu" in d:
            ev.nu = float(d["nu"])
        return -ev.loglik(d["mu"], d["sigma2"], d["gamma"], d["d"])

    starts = _default_starts(np.asarray(x.values), config.start_box)[: config.n_starts]
    results = []
    diagnostics = []
    for k, s in enumerate(starts):
        s = {**s, "nu": nu}
        t0 = _to_transformed(names, [s[n] for n in names])
        try:
            res = two_phase_minimize(
                neg_loglik_t, t0,
                simplex_iters=config.simplex_iters,
                newton_iters=config.newton_iters,
            )
            if np.isfinite(res.fun) and res.fun < 1e299:
                results.append((res.fun, k, res))
            else:
                diagnostics.append(f"start {k}: no finite likelihood found")
        except Exception as exc:  # noqa: BLE001 - per-start failures are data
            diagnostics.append(f"start {k}: {exc}")
    if not results:
        raise OptimizationFailureError(diagnostics)

    fun_best, start_used, best = min(results, key=lambda r: (r[0], r[1]))
    est_free = _from_transformed(names, best.x)
    est = full_params(est_free)
    est.setdefault("nu", nu)

    # Hessian in natural coordinates, over the four canonical parameters
    theta_hat = np.array([est[n] for n in PARAM_NAMES])

    def loglik_nat(theta):
        if "nu" in est and est["nu"] != ev.nu:
            ev.nu = float(est["nu"])
        return ev.loglik(*theta)

    steps = 1e-3 * np.maximum(np.abs(theta_hat), 0.1)
    # keep gamma probes inside the open domain
    gap = GAMMA_CLAMP - abs(theta_hat[2])
    if gap <= 0:
        steps[2] = 0.0
    else:
        steps[2] = min(steps[2], 0.5 * gap)
    if steps[2] > 0:
        hess = central_hessian(loglik_nat, theta_hat, steps=steps)
    else:
        hess = np.full((4, 4), np.nan)

    std_errors = np.full(4, np.nan)
    if np.all(np.isfinite(hess)):
        try:
            cov = np.linalg.inv(-hess)
            diag = np.diag(cov)
            ok = diag > 0
            std_errors[ok] = np.sqrt(diag[ok])
        except np.linalg.LinAlgError:
            pass
    intervals = np.column_stack([theta_hat - _Z90 * std_errors, theta_hat + _Z90 * std_errors])

    return MleResult(
        estimates={n: float(v) for n, v in zip(PARAM_NAMES, theta_hat)} | (
            {"nu": float(est["nu"])} if not config.fix_nu_zero else {}
        ),
        loglik=-fun_best,
        hessian=hess,
        std_errors=std_errors,
        intervals_90=intervals,
        start_used=start_used,
        clamped_gamma=abs(est["gamma"]) >= _CLAMP_FLAG_THRESHOLD,
        n_evals=sum(r[2].n_evals for r in results),
        diagnostics=diagnostics,
    )


def mc_error_study(
    x: FieldRealization,
    n_list,
    n_reps: int,
    config: MleConfig = MleConfig(),
    base_seed: int = 7_700,
) -> list[dict]:
    """Refit one realization with n_reps independent uniform streams per N.

    Returns rows (param, p, N, rep, estimate, se) capturing the Monte
    Carlo spread of the estimates.
    """
    if n_reps < 2:
        raise ValueError("n_reps must be >= 2")
    rows = []
    for n_mc in n_list:
        for rep in range(n_reps):
            cfg = MleConfig(
                n_mc=int(n_mc),
                n_starts=config.n_starts,
                start_box=config.start_box,
                simplex_iters=config.simplex_iters,
                newton_iters=config.newton_iters,
                crn_seed=base_seed + rep,
                fix_nu_zero=config.fix_nu_zero,
                fixed=config.fixed,
            )
            res = fit(x, cfg)
            for i, name in enumerate(PARAM_NAMES):
                rows.append(
                    {
                        "param": name,
                        "p": x.grid.p,
                        "N": int(n_mc),
                        "rep": rep,
                        "estimate": res.estimates[name],
                        "se": float(res.std_errors[i]),
                    }
                )
    return rows


def consistency_study(
    p_list,
    n_sims: int,
    truth: CsnParams,
    n_mc: int = 1000,
    config: MleConfig = MleConfig(),
    seed: int = 1_234,
    chain: ChainConfig = ChainConfig(),
) -> tuple[list[dict], list[dict]]:
    """Bias/spread of the estimator versus grid size.

    Simulates n_sims fields per grid size (sides sqrt(p)), fits each, and
    summarizes bias, sd, gamma-clamp frequency and 90%-interval coverage
    per parameter.  Returns (summary_rows, raw_rows).
    """
    if n_sims < 2:
        raise ValueError("n_sims must be >= 2")
    truth_vals = {"mu": truth.mu, "sigma2": truth.sigma2, "gamma": truth.gamma, "d": truth.d_h}
    raw = []
    summary = []
    ss = np.random.SeedSequence(seed)
    for p in p_list:
        side = int(round(sqrt(p)))
        if side * side != p:
            raise ValueError(f"grid size {p} is not a square number")
        grid = GridSpec(n_rows=side, n_cols=side)
        model = build_model(truth, grid)
        sim_seeds = ss.spawn(n_sims)
        for i, child in enumerate(sim_seeds):
            seed_i = int(np.random.default_rng(child).integers(2**63 - 1))
            real = simulate_field(model, seed=seed_i, config=chain)
            cfg = MleConfig(
                n_mc=n_mc,
                n_starts=config.n_starts,
                start_box=config.start_box,
                simplex_iters=config.simplex_iters,
                newton_iters=config.newton_iters,
                crn_seed=config.crn_seed + i,
                fix_nu_zero=config.fix_nu_zero,
                fixed=config.fixed,
            )
            res = fit(real, cfg)
            for j, name in enumerate(PARAM_NAMES):
                lo, hi = res.intervals_90[j]
                raw.append(
                    {
                        "param": name,
                        "p": p,
                        "rep": i,
                        "estimate": res.estimates[name],
                        "se": float(res.std_errors[j]),
                        "covered": bool(lo <= truth_vals[name] <= hi)
                        if np.isfinite(lo) and np.isfinite(hi)
                        else False,
                        "clamped": res.clamped_gamma,
                    }
                )
        for name in PARAM_NAMES:
            ests = np.array([r["estimate"] for r in raw if r["p"] == p and r["param"] == name])
            cover = np.array([r["covered"] for r in raw if r["p"] == p and r["param"] == name])
            clamp = np.array([r["clamped"] for r in raw if r["p"] == p and r["param"] == name])
            summary.append(
                {
                    "param": name,
                    "p": p,
                    "bias": float(np.mean(ests) - truth_vals[name]),
                    "sd": float(np.std(ests, ddof=1)),
                    "coverage90": float(np.mean(cover)),
                    "clamp_fraction": float(np.mean(clamp)),
                }
            )
    return summary, raw
