"""The closed skew-normal random field on a regular grid.

The field is the first block of a latent Gaussian pair conditioned on
the second block being jointly negative at every site.  With correlation
matrix C, scale sigma2, skewness gamma in (-1, 1) and co-located
truncation sites, the joint covariance is

    [ sigma^2 C            -gamma sigma C              ]
    [ -gamma sigma C       (1 - gamma^2) I + gamma^2 C ]

and the log-density of a field vector x splits into an exact Gaussian
term, a sum of exact univariate normal cdf terms, and a single
p-dimensional orthant probability handled by the Monte Carlo estimator
in `orthant`.  gamma = 0 collapses to the plain Gaussian field and the
cdf terms cancel analytically, so that path never touches Monte Carlo.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from math import log, sqrt

import numpy as np
from scipy.linalg import solve_triangular

from . import truncated
from .gaussian import (
    CholFactor,
    GridSpec,
    cholesky,
    chol_solve,
    exp_correlation_matrix,
    norm_logcdf,
    LOG_2PI,
)
from .orthant import CrnStream, OrthantProblem, estimate_orthant

__all__ = [
    "GAMMA_CLAMP",
    "CsnParams",
    "CsnFieldModel",
    "FieldRealization",
    "ChainConfig",
    "MomentSummary",
    "build_model",
    "csn_logpdf",
    "simulate_field",
    "marginal_density_mc",
    "empirical_moments",
    "case_params",
]

# |gamma| >= 1 is accepted but clamped to this value for covariance assembly
GAMMA_CLAMP = 1.0 - 1e-6

# Table of the six study cases: (mu, nu, sigma2, gamma, d_h, d_v)
_CASE_TABLE = {
    1: (0.0, 0.0, 1.0, 0.975, 3.0, 3.0),
    2: (0.0, 0.0, 1.0, 0.975, 0.0, 0.0),
    3: (0.0, 0.0, 1.0, 0.975, 5.0, 5.0),
    4: (0.0, 0.0, 1.0, 0.995, 3.0, 3.0),
    5: (0.0, 2.0, 1.0, 0.975, 3.0, 3.0),
    6: (0.0, 0.0, 1.0, 0.975, 5.0, 0.0),
}


@dataclass(frozen=True)
class CsnParams:
    """Scalar field parameters (location, latent location, scale, skewness, ranges)."""

    mu: float = 0.0
    nu: float = 0.0
    sigma2: float = 1.0
    gamma: float = 0.0
    d_h: float = 1.0
    d_v: float = 1.0
    gamma_clamped: bool = dc_field(default=False, compare=False)

    def __post_init__(self):
        if self.sigma2 <= 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if self.d_h < 0 or self.d_v < 0:
            raise ValueError("correlation ranges must be >= 0")
        if abs(self.gamma) >= 1.0:
            object.__setattr__(self, "gamma", float(np.sign(self.gamma)) * GAMMA_CLAMP)
            object.__setattr__(self, "gamma_clamped", True)

    @property
    def sigma(self) -> float:
        return sqrt(self.sigma2)


def case_params(case_id: int) -> CsnParams:
    """Parameters of one of the six study cases."""
    if case_id not in _CASE_TABLE:
        raise ValueError(f"case id must be in 1..6, got {case_id}")
    mu, nu, sigma2, gamma, d_h, d_v = _CASE_TABLE[case_id]
    return CsnParams(mu=mu, nu=nu, sigma2=sigma2, gamma=gamma, d_h=d_h, d_v=d_v)


@dataclass(frozen=True)
class ChainConfig:
    """Knobs for the latent truncated-Gaussian chain used in simulation."""

    n_a: int | None = None          # default min(100, p)
    max_sets: int | None = None     # default ceil(p / n_a) * 4
    burn_in: int | None = None      # default 10 * number of sets
    n_iter: int | None = None       # post burn-in iterations, default 5 * sets
    thin: int = 1


@dataclass(frozen=True)
class FieldRealization:
    grid: GridSpec
    values: np.ndarray
    seed: int
    chain_meta: dict

    def __post_init__(self):
        if self.values.shape != (self.grid.p,):
            raise ValueError("realization length does not match grid")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("realization contains nonfinite values")


class CsnFieldModel:
    """Immutable model object caching the factorizations every path needs."""

    def __init__(self, params: CsnParams, grid: GridSpec):
        self.params = params
        self.grid = grid
        p = grid.p
        g = params.gamma
        self.corr = exp_correlation_matrix(grid, params.d_h, params.d_v)
        self.chol_c = cholesky(self.corr)
        self.latent_cov = (1.0 - g * g) * np.eye(p) + (g * g) * self.corr
        self.chol_latent = cholesky(self.latent_cov)
        # Schur complement of the joint covariance; PSD here certifies the
        # whole 2p x 2p parameterization on this grid
        if g == 0.0:
            cond = params.sigma2 * self.corr
        else:
            w = chol_solve(self.chol_latent, self.corr)
            cond = params.sigma2 * (self.corr - (g * g) * (self.corr @ w))
            cond = 0.5 * (cond + cond.T)
        self.cond_cov_u1 = cond
        self.chol_cond_u1 = cholesky(cond)
        self._orthant_shift = None
        self._plans: dict[tuple, truncated.BlockPlan] = {}

    @property
    def p(self) -> int:
        return self.grid.p

    def orthant_problem(self) -> OrthantProblem:
        if self._orthant_shift is None:
            from .orthant import default_shift

            self._orthant_shift = default_shift(self.latent_cov)
        return OrthantProblem(
            mean=np.full(self.p, self.params.nu),
            chol=self.chol_latent,
            shift=self._orthant_shift,
        )

    def block_plan(self, n_a: int | None = None, max_sets: int | None = None):
        key = (n_a, max_sets)
        if key not in self._plans:
            size = min(100, self.p) if n_a is None else n_a
            self._plans[key] = truncated.build_block_plan(
                self.latent_cov, n_a=size, max_sets=max_sets
            )
        return self._plans[key]


def build_model(params: CsnParams, grid: GridSpec) -> CsnFieldModel:
    """Assemble correlation, latent covariance and conditional factors.

    Raises the PSD error from the jitter policy if the parameterization
    is invalid on this grid.
    """
    return CsnFieldModel(params, grid)


def _gaussian_logpdf(x: np.ndarray, model: CsnFieldModel) -> float:
    p = model.p
    pr = model.params
    r = x - pr.mu
    w = solve_triangular(model.chol_c.lower, r, lower=True)
    return -0.5 * (p * (LOG_2PI + log(pr.sigma2)) + model.chol_c.logdet + float(w @ w) / pr.sigma2)


def csn_logpdf(x: np.ndarray, model: CsnFieldModel, crn: CrnStream | None = None) -> float:
    """Log-density of a field vector; deterministic given the CRN stream.

    gamma = 0 takes the exact Gaussian path, no Monte Carlo involved.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (model.p,):
        raise ValueError("field vector length does not match grid")
    pr = model.params
    log_gauss = _gaussian_logpdf(x, model)
    if pr.gamma == 0.0:
        # cdf terms cancel the orthant denominator exactly
        return log_gauss
    if crn is None:
        raise ValueError("a CrnStream is required when gamma != 0")
    s2 = 1.0 - pr.gamma * pr.gamma
    m = pr.nu - (pr.gamma / pr.sigma) * (x - pr.mu)
    log_num = float(np.sum(norm_logcdf(0.0, mean=m, var=s2)))
    est = estimate_orthant(model.orthant_problem(), crn)
    return log_gauss + log_num - est.log_value


def simulate_field(
    model: CsnFieldModel, seed: int, config: ChainConfig = ChainConfig()
) -> FieldRealization:
    """One draw from the field.

    Samples the latent truncated block with the block MH chain, then the
    field given that block from its exact Gaussian conditional.
    """
    pr = model.params
    p = model.p
    ss = np.random.SeedSequence(seed)
    chain_ss, gauss_ss = ss.spawn(2)
    rng = np.random.default_rng(gauss_ss)
    mu1 = np.full(p, pr.mu)

    if pr.gamma == 0.0:
        values = mu1 + pr.sigma * (model.chol_c.lower @ rng.standard_normal(p))
        meta = {"acceptance_rate": None, "n_iter": 0, "burn_in": 0, "n_a": 0}
        return FieldRealization(grid=model.grid, values=values, seed=seed, chain_meta=meta)

    plan = model.block_plan(config.n_a, config.max_sets)
    burn = 10 * plan.n_sets if config.burn_in is None else config.burn_in
    extra = 5 * plan.n_sets if config.n_iter is None else config.n_iter
    total = burn + max(extra, 1)
    nu1 = np.full(p, pr.nu)
    draws, rate = truncated.mh_sample(
        mean=nu1, cov=None, plan=plan, n_iter=total, burn_in=total - 1, seed=chain_ss
    )
    u2 = draws[-1]

    w = chol_solve(model.chol_latent, u2 - nu1)
    cond_mean = mu1 - pr.gamma * pr.sigma * (model.corr @ w)
    values = cond_mean + model.chol_cond_u1.lower @ rng.standard_normal(p)
    meta = {
        "acceptance_rate": rate,
        "n_iter": total,
        "burn_in": burn,
        "n_a": plan.n_a,
        "n_sets": plan.n_sets,
    }
    return FieldRealization(grid=model.grid, values=values, seed=seed, chain_meta=meta)


def marginal_density_mc(
    x_j: float, j: int, model: CsnFieldModel, n_mc: int = 2000, seed: int = 0
) -> float:
    """Monte Carlo estimate of the single-site marginal density at x_j.

    The numerator integral is estimated by sampling the remaining sites
    from their Gaussian conditional given x_j and averaging the product
    of univariate cdf terms; the denominator reuses the orthant
    estimator.  p = 1 is exact (empty integral).
    """
    pr = model.params
    p = model.p
    if not 0 <= j < p:
        raise ValueError(f"site index {j} outside grid")
    s2 = 1.0 - pr.gamma * pr.gamma
    from .gaussian import norm_pdf_cdf

    pdf_j, _ = norm_pdf_cdf(x_j, mean=pr.mu, var=pr.sigma2)
    if pr.gamma == 0.0:
        return pdf_j
    lcdf_j = float(norm_logcdf(0.0, mean=pr.nu - (pr.gamma / pr.sigma) * (x_j - pr.mu), var=s2))

    if p == 1:
        log_den = float(norm_logcdf(0.0, mean=pr.nu, var=1.0))
        return pdf_j * float(np.exp(lcdf_j - log_den))

    ss = np.random.SeedSequence(seed)
    cond_ss, den_ss = ss.spawn(2)
    rng = np.random.default_rng(cond_ss)

    keep = np.arange(p) != j
    c_oj = model.corr[keep, j]
    cond_mean = pr.mu + c_oj * (x_j - pr.mu)
    cond_cov = pr.sigma2 * (model.corr[np.ix_(keep, keep)] - np.outer(c_oj, c_oj))
    lc = cholesky(cond_cov)
    draws = cond_mean + rng.standard_normal((n_mc, p - 1)) @ lc.lower.T

    m = pr.nu - (pr.gamma / pr.sigma) * (draws - pr.mu)
    log_terms = np.sum(norm_logcdf(0.0, mean=m, var=s2), axis=1)
    mx = float(np.max(log_terms))
    log_num = mx + float(np.log(np.mean(np.exp(log_terms - mx))))

    den_crn_seed = int(np.random.default_rng(den_ss).integers(2**63 - 1))
    from .orthant import make_crn

    den = estimate_orthant(model.orthant_problem(), make_crn(den_crn_seed, n_mc, p))
    return pdf_j * float(np.exp(lcdf_j + log_num - den.log_value))


@dataclass(frozen=True)
class MomentSummary:
    mean: float
    variance: float
    skewness: float
    n_pooled: int


def empirical_moments(samples, sites) -> MomentSummary:
    """Pooled mean, unbiased variance and adjusted sample skewness.

    `samples` is a sequence of FieldRealization (or plain vectors);
    `sites` the linear indices pooled from each.  Constant pools report
    variance 0 and NaN skewness.
    """
    sites = np.asarray(sites, dtype=int)
    if sites.size == 0:
        raise ValueError("site set must not be empty")
    if len(samples) < 2:
        raise ValueError("need at least 2 realizations")
    vals = np.concatenate(
        [s.values[sites] if isinstance(s, FieldRealization) else np.asarray(s)[sites] for s in samples]
    )
    n = vals.size
    mean = float(np.mean(vals))
    var = float(np.var(vals, ddof=1))
    if var == 0.0:
        return MomentSummary(mean=mean, variance=0.0, skewness=float("nan"), n_pooled=n)
    m2 = float(np.mean((vals - mean) ** 2))
    m3 = float(np.mean((vals - mean) ** 3))
    g1 = m3 / m2**1.5
    adj = sqrt(n * (n - 1)) / (n - 2) if n > 2 else float("nan")
    return MomentSummary(mean=mean, variance=var, skewness=adj * g1, n_pooled=n)
