"""Bayesian prediction with a skew-field prior and a linear-Gaussian likelihood.

The unknown field m (one or three co-located variables on the grid) gets
the closed skew-normal prior: m = [U1 | U2 <= 0] with

    Cov(U1)      = Sigma0 kron C,     C = C_h kron C_v
    Cov(U1, U2)  = -(Sigma0 B) kron C,   B = Gamma0 Omega0 (diagonal)
    Cov(U2)      = Delta + (B Sigma0 B) kron C

where Omega0 = diag(Sigma0)^(-1/2) and Delta couples only within a
variable.  Observations follow d = G m + e with G = W A D (wavelet
convolution, angle-dependent weak-contrast reflection coefficients,
vertical differencing) and colored Gaussian noise.

Because the conditioning is linear-Gaussian, the posterior is again a
skew field: condition the (U1, U2, d) Gaussian on d, keep the pending
truncation U2 <= 0, and sample it with the block MH chain.  Setting
every skewness entry to zero reproduces the classical Gauss-linear
posterior exactly, which doubles as the analytic baseline model.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field as dc_field
from functools import cached_property

import numpy as np
from scipy.linalg import toeplitz

from . import truncated
from ._optim import two_phase_minimize
from .errors import (
    ConditioningDegenerateError,
    DataFormatError,
    DesignMismatchError,
    NotPositiveSemidefiniteError,
    OptimizationFailureError,
)
from .field import GAMMA_CLAMP, ChainConfig
from .gaussian import (
    GridSpec,
    KroneckerCov,
    LOG_2PI,
    axis_correlation,
    cholesky,
    chol_solve,
)
from .orthant import CrnStream, OrthantProblem, default_shift, estimate_orthant, make_crn

__all__ = [
    "WaveletSpec",
    "InversionDesign",
    "PriorSpec",
    "LinearObsModel",
    "PosteriorCsn",
    "PredictionResult",
    "HyperParams",
    "FittedHyper",
    "HyperFitConfig",
    "SynthData",
    "var_names",
    "ricker_taps",
    "build_forward",
    "forward_shape",
    "error_cov",
    "posterior_csn",
    "gauss_linear_posterior",
    "predict",
    "condition_on_well",
    "marginal_loglik_obs",
    "fit_hyperparams",
    "posterior_from_fit",
    "synth_data",
    "prior_predictive_samples",
    "prior_quantile_bands",
    "evaluate",
    "read_observations",
    "write_observations",
    "read_well",
    "write_well",
    "write_predictions",
]

_Z80 = 1.2815515655446004  # 90th percentile of the standard normal


def var_names(n_vars: int) -> tuple[str, ...]:
    if n_vars == 3:
        return ("vp", "vs", "rho")
    return tuple(f"m{i}" for i in range(n_vars))


def ricker_taps(peak_freq: float, n_taps: int | None = None) -> np.ndarray:
    """Ricker kernel sampled at unit spacing; peak_freq in cycles per sample."""
    if peak_freq <= 0:
        raise ValueError("peak frequency must be positive")
    if n_taps is None:
        n_taps = 2 * math.ceil(1.2 / peak_freq) + 1
    center = n_taps // 2
    t = np.arange(n_taps) - center
    a = (np.pi * peak_freq * t) ** 2
    return (1.0 - 2.0 * a) * np.exp(-a)


@dataclass(frozen=True)
class WaveletSpec:
    """Convolution kernel; `delta` gives the identity wavelet."""

    kind: str = "ricker"
    peak_freq: float = 0.1
    n_taps: int | None = None
    taps: tuple | None = None       # used when kind == "custom"

    def kernel(self) -> np.ndarray:
        if self.kind == "ricker":
            return ricker_taps(self.peak_freq, self.n_taps)
        if self.kind == "delta":
            return np.array([1.0])
        if self.kind == "custom":
            if self.taps is None:
                raise ValueError("custom wavelet needs taps")
            return np.asarray(self.taps, dtype=float)
        raise ValueError(f"unknown wavelet kind {self.kind!r}")


def _convolution_matrix(taps: np.ndarray, n: int) -> np.ndarray:
    center = len(taps) // 2
    col = np.zeros(n)
    row = np.zeros(n)
    take = min(n, len(taps) - center)
    col[:take] = taps[center:center + take]
    take_r = min(n, center + 1)
    row[:take_r] = taps[center::-1][:take_r]
    return toeplitz(col, row)


def _difference_matrix(n: int) -> np.ndarray:
    # contrasts along the time axis; the first sample has no interface above
    d = np.eye(n)
    d[0, 0] = 0.0
    d[1:, :-1] -= np.eye(n - 1)
    return d


def aki_richards_coefficients(angles_deg, vs_vp_ratio: float) -> np.ndarray:
    """Weak-contrast reflection coefficients, one (vp, vs, rho) row per angle."""
    theta = np.deg2rad(np.asarray(angles_deg, dtype=float))
    r2 = vs_vp_ratio**2
    sin2 = np.sin(theta) ** 2
    c_vp = 0.5 * (1.0 + np.tan(theta) ** 2)
    c_vs = -4.0 * r2 * sin2
    c_rho = 0.5 * (1.0 - 4.0 * r2 * sin2)
    return np.column_stack([c_vp, c_vs, c_rho])


def forward_shape(grid: GridSpec, n_angles: int, n_vars: int = 3) -> tuple[int, int]:
    """(rows, cols) of the forward matrix without materializing it."""
    return n_angles * grid.p, n_vars * grid.p


def build_forward(
    grid: GridSpec,
    angles_deg,
    wavelet: WaveletSpec = WaveletSpec(),
    background: tuple[float, float, float] = (3.0, 1.5, 2.2),
    n_vars: int = 3,
) -> np.ndarray:
    """Dense forward matrix G = W A D in the global layout.

    Rows are angle-major over observations; columns variable-major over
    the field.  Per trace the operator convolves the vertical contrasts
    of each variable weighted by its angle-dependent coefficient.
    """
    angles = list(angles_deg)
    if len(angles) == 0:
        raise ValueError("need at least one angle")
    vp, vs, rho = background
    if vp <= 0 or vs <= 0 or rho <= 0:
        raise ValueError("background properties must be positive")
    if n_vars not in (1, 3):
        raise ValueError("n_vars must be 1 or 3")
    coef = aki_richards_coefficients(angles, vs / vp)
    if n_vars == 1:
        coef = coef[:, :1]
    n_t, n_x = grid.n_rows, grid.n_cols
    taps = wavelet.kernel()
    d_op = _difference_matrix(n_t)
    w_op = _convolution_matrix(taps, n_t)
    wd = w_op @ d_op
    eye_x = np.eye(n_x)
    per_trace = np.kron(eye_x, wd)
    blocks = [
        [coef[k, v] * per_trace for v in range(n_vars)]
        for k in range(len(angles))
    ]
    return np.block(blocks)


def error_cov(sigma2_e: float, ranges: tuple[float, float, float], dims) -> KroneckerCov:
    """sigma2_e * C_w kron C_h kron C_v over (angle, trace, time) axes.

    Axis distances are index distances; a range of 0 is the identity
    limit, negative ranges are rejected.
    """
    if sigma2_e < 0:
        raise ValueError("error variance must be >= 0")
    d_w, d_h, d_v = ranges
    n_w, n_h, n_v = dims
    factors = (
        axis_correlation(n_w, 1.0, d_w),
        axis_correlation(n_h, 1.0, d_h),
        axis_correlation(n_v, 1.0, d_v),
    )
    return KroneckerCov(factors=factors, scale=float(sigma2_e))


@dataclass(frozen=True)
class InversionDesign:
    """Geometry and physics shared by fitting, simulation and prediction."""

    grid: GridSpec
    n_vars: int = 3
    angles_deg: tuple = (12.0, 22.0, 31.0)
    wavelet: WaveletSpec = WaveletSpec()
    background: tuple = (3.0, 1.5, 2.2)
    well_col: int | None = None
    window_traces: int = 4

    def __post_init__(self):
        if self.n_vars not in (1, 3):
            raise ValueError("n_vars must be 1 or 3")
        wc = self.grid.n_cols // 2 if self.well_col is None else self.well_col
        if not 0 <= wc < self.grid.n_cols:
            raise ValueError("well column outside grid")
        object.__setattr__(self, "well_col", wc)

    @property
    def n_angles(self) -> int:
        return len(self.angles_deg)

    @property
    def dim_field(self) -> int:
        return self.n_vars * self.grid.p

    @property
    def dim_obs(self) -> int:
        return self.n_angles * self.grid.p

    @property
    def token(self) -> tuple:
        g = self.grid
        return (g.n_rows, g.n_cols, g.spacing_v, g.spacing_h, self.n_vars)

    @cached_property
    def forward(self) -> np.ndarray:
        return build_forward(
            self.grid, self.angles_deg, self.wavelet, self.background, self.n_vars
        )

    def well_indices(self) -> np.ndarray:
        """Variable-major field indices of the well trace."""
        base = self.well_col * self.grid.n_rows + np.arange(self.grid.n_rows)
        return np.concatenate([v * self.grid.p + base for v in range(self.n_vars)])

    def windowed(self) -> tuple["InversionDesign", np.ndarray]:
        """Sub-design of traces around the well plus the kept-column indices."""
        wc = self.well_col
        lo = max(0, wc - self.window_traces)
        hi = min(self.grid.n_cols - 1, wc + self.window_traces)
        cols = np.arange(lo, hi + 1)
        sub_grid = GridSpec(
            n_rows=self.grid.n_rows,
            n_cols=len(cols),
            spacing_v=self.grid.spacing_v,
            spacing_h=self.grid.spacing_h,
        )
        sub = InversionDesign(
            grid=sub_grid,
            n_vars=self.n_vars,
            angles_deg=self.angles_deg,
            wavelet=self.wavelet,
            background=self.background,
            well_col=wc - lo,
            window_traces=self.window_traces,
        )
        return sub, cols

    def restrict_obs(self, d: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Observation subvector for the given trace columns."""
        cube = np.asarray(d, dtype=float).reshape(
            self.n_angles, self.grid.n_cols, self.grid.n_rows
        )
        return cube[:, cols, :].reshape(-1)


@dataclass(frozen=True)
class PriorSpec:
    """Per-variable location/scale/skewness plus the spatial ranges."""

    n_vars: int
    mu0: np.ndarray
    sigma0: np.ndarray
    gamma_vec: np.ndarray
    d_h: float
    d_v: float
    grid: GridSpec
    delta_mode: str = "one-minus-gamma-squared"

    def __post_init__(self):
        mu0 = np.atleast_1d(np.asarray(self.mu0, dtype=float))
        sigma0 = np.atleast_2d(np.asarray(self.sigma0, dtype=float))
        gam = np.atleast_1d(np.asarray(self.gamma_vec, dtype=float))
        gam = np.clip(gam, -GAMMA_CLAMP, GAMMA_CLAMP)
        object.__setattr__(self, "mu0", mu0)
        object.__setattr__(self, "sigma0", sigma0)
        object.__setattr__(self, "gamma_vec", gam)
        if mu0.shape != (self.n_vars,) or gam.shape != (self.n_vars,):
            raise ValueError("mu0/gamma_vec length must equal n_vars")
        if sigma0.shape != (self.n_vars, self.n_vars):
            raise ValueError("sigma0 must be n_vars x n_vars")
        if self.d_h < 0 or self.d_v < 0:
            raise ValueError("prior ranges must be >= 0")
        cholesky(sigma0)  # PSD check
        if self.delta_mode not in ("one-minus-gamma-squared", "one-minus-gamma-literal"):
            raise ValueError(f"unknown delta mode {self.delta_mode!r}")

    @property
    def dim(self) -> int:
        return self.n_vars * self.grid.p

    @cached_property
    def site_corr(self) -> np.ndarray:
        c_h = axis_correlation(self.grid.n_cols, self.grid.spacing_h, self.d_h)
        c_v = axis_correlation(self.grid.n_rows, self.grid.spacing_v, self.d_v)
        return np.kron(c_h, c_v)

    @cached_property
    def blocks(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(mu1, Sigma1, Sigma12, Sigma2) of the joint latent pair."""
        c = self.site_corr
        p_s = self.grid.p
        gam = np.diag(self.gamma_vec)
        omega = np.diag(1.0 / np.sqrt(np.diag(self.sigma0)))
        b = gam @ omega
        mu1 = np.kron(self.mu0, np.ones(p_s))
        sigma1 = np.kron(self.sigma0, c)
        sigma12 = -np.kron(self.sigma0 @ b, c)
        if self.delta_mode == "one-minus-gamma-squared":
            delta0 = np.eye(self.n_vars) - gam @ gam
        else:
            delta0 = (np.eye(self.n_vars) - gam) @ (np.eye(self.n_vars) - gam)
        sigma2 = np.kron(delta0, np.eye(p_s)) + np.kron(b @ self.sigma0 @ b, c)
        return mu1, sigma1, sigma12, sigma2

    @property
    def is_gaussian(self) -> bool:
        return bool(np.all(self.gamma_vec == 0.0))


@dataclass(frozen=True)
class LinearObsModel:
    """Forward operator, noise scale/correlation and the data vector."""

    G: np.ndarray
    sigma2_e: float
    error_corr: KroneckerCov
    d: np.ndarray | None = None

    def __post_init__(self):
        if self.sigma2_e < 0:
            raise ValueError("error variance must be >= 0")
        if self.error_corr.dim != self.G.shape[0]:
            raise ValueError("error correlation dimension must match G rows")
        if self.d is not None and self.d.shape != (self.G.shape[0],):
            raise ValueError("data length must match G rows")

    def error_cov_dense(self) -> np.ndarray:
        return self.sigma2_e * self.error_corr.dense()

    @classmethod
    def build(cls, design: InversionDesign, theta: "HyperParams", d=None) -> "LinearObsModel":
        corr = error_cov(
            1.0,
            (theta.d_w_e, theta.d_h_e, theta.d_v_e),
            (design.n_angles, design.grid.n_cols, design.grid.n_rows),
        )
        return cls(
            G=design.forward,
            sigma2_e=float(theta.sigma2_e),
            error_corr=corr,
            d=None if d is None else np.asarray(d, dtype=float),
        )


@dataclass(frozen=True)
class PosteriorCsn:
    """Gaussian law of (U1, U2) given the data, truncation U2 <= 0 pending."""

    cond_mean_u1: np.ndarray
    cond_cov_u1: np.ndarray
    cond_mean_u2: np.ndarray
    cond_cov_u2: np.ndarray
    cross_cov: np.ndarray
    grid: GridSpec
    n_vars: int


@dataclass(frozen=True)
class PredictionResult:
    median: np.ndarray
    q10: np.ndarray
    q90: np.ndarray
    sd: np.ndarray
    samples: np.ndarray | None
    acceptance_rate: float | None
    grid: GridSpec
    n_vars: int


@dataclass(frozen=True)
class HyperParams:
    """Full hyperparameter set of the observation and prior models."""

    sigma2_e: float
    d_w_e: float
    d_h_e: float
    d_v_e: float
    mu0: np.ndarray
    sigma0: np.ndarray
    gamma_vec: np.ndarray
    d_h_m: float
    d_v_m: float

    def __post_init__(self):
        object.__setattr__(self, "mu0", np.atleast_1d(np.asarray(self.mu0, dtype=float)))
        object.__setattr__(self, "sigma0", np.atleast_2d(np.asarray(self.sigma0, dtype=float)))
        object.__setattr__(
            self, "gamma_vec", np.atleast_1d(np.asarray(self.gamma_vec, dtype=float))
        )

    @property
    def n_vars(self) -> int:
        return self.mu0.shape[0]

    def prior(self, design: InversionDesign) -> PriorSpec:
        return PriorSpec(
            n_vars=design.n_vars,
            mu0=self.mu0,
            sigma0=self.sigma0,
            gamma_vec=self.gamma_vec,
            d_h=self.d_h_m,
            d_v=self.d_v_m,
            grid=design.grid,
        )

    def to_dict(self) -> dict:
        return {
            "sigma2_e": float(self.sigma2_e),
            "d_w_e": float(self.d_w_e),
            "d_h_e": float(self.d_h_e),
            "d_v_e": float(self.d_v_e),
            "mu0": self.mu0.tolist(),
            "sigma0": self.sigma0.tolist(),
            "gamma_vec": self.gamma_vec.tolist(),
            "d_h_m": float(self.d_h_m),
            "d_v_m": float(self.d_v_m),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        return cls(
            sigma2_e=float(d["sigma2_e"]),
            d_w_e=float(d["d_w_e"]),
            d_h_e=float(d["d_h_e"]),
            d_v_e=float(d["d_v_e"]),
            mu0=np.asarray(d["mu0"], dtype=float),
            sigma0=np.asarray(d["sigma0"], dtype=float),
            gamma_vec=np.asarray(d["gamma_vec"], dtype=float),
            d_h_m=float(d["d_h_m"]),
            d_v_m=float(d["d_v_m"]),
        )


def posterior_csn(prior: PriorSpec, obs: LinearObsModel) -> PosteriorCsn:
    """Condition the joint latent pair on d = G U1 + e."""
    if obs.d is None:
        raise ValueError("observation model carries no data vector")
    mu1, sigma1, sigma12, sigma2 = prior.blocks
    g = obs.G
    if g.shape[1] != prior.dim:
        raise ValueError(
            f"forward matrix has {g.shape[1]} columns but prior dimension is {prior.dim}"
        )
    t1 = sigma1 @ g.T                       # Cov(U1, d)
    t2 = sigma12.T @ g.T                    # Cov(U2, d)
    sigma_d = g @ t1 + obs.error_cov_dense()
    sigma_d = 0.5 * (sigma_d + sigma_d.T)
    try:
        chol_d = cholesky(sigma_d)
    except NotPositiveSemidefiniteError as exc:
        raise ConditioningDegenerateError(
            f"observation covariance is singular: {exc}"
        ) from exc
    resid = obs.d - g @ mu1
    k1 = chol_solve(chol_d, t1.T).T         # Cov(U1,d) Sigma_d^{-1}
    k2 = chol_solve(chol_d, t2.T).T
    cov_u1 = sigma1 - k1 @ t1.T
    cov_u2 = sigma2 - k2 @ t2.T
    cross = sigma12 - k1 @ t2.T
    return PosteriorCsn(
        cond_mean_u1=mu1 + k1 @ resid,
        cond_cov_u1=0.5 * (cov_u1 + cov_u1.T),
        cond_mean_u2=k2 @ resid,
        cond_cov_u2=0.5 * (cov_u2 + cov_u2.T),
        cross_cov=cross,
        grid=prior.grid,
        n_vars=prior.n_vars,
    )


def gauss_linear_posterior(prior: PriorSpec, obs: LinearObsModel) -> PredictionResult:
    """Closed-form Gauss-linear posterior (skewness ignored).

    This is the analytic baseline model: no sampling, bands are exact
    normal quantiles.
    """
    if obs.d is None:
        raise ValueError("observation model carries no data vector")
    mu1, sigma1, _, _ = prior.blocks
    g = obs.G
    t1 = sigma1 @ g.T
    sigma_d = g @ t1 + obs.error_cov_dense()
    sigma_d = 0.5 * (sigma_d + sigma_d.T)
    try:
        chol_d = cholesky(sigma_d)
    except NotPositiveSemidefiniteError as exc:
        raise ConditioningDegenerateError(
            f"observation covariance is singular: {exc}"
        ) from exc
    k1 = chol_solve(chol_d, t1.T).T
    mean = mu1 + k1 @ (obs.d - g @ mu1)
    cov = sigma1 - k1 @ t1.T
    sd = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return PredictionResult(
        median=mean,
        q10=mean - _Z80 * sd,
        q90=mean + _Z80 * sd,
        sd=sd,
        samples=None,
        acceptance_rate=None,
        grid=prior.grid,
        n_vars=prior.n_vars,
    )


def _sample_truncated_pair(
    mean_u1, cov_u1, mean_u2, cov_u2, cross, n_samples, seed, chain: ChainConfig
):
    """Draw (U1, U2) samples with U2 <= 0; returns (U1 draws, acceptance rate)."""
    q = mean_u2.shape[0]
    ss = np.random.SeedSequence(seed)
    chain_ss, gauss_ss = ss.spawn(2)
    rng = np.random.default_rng(gauss_ss)

    scale = float(np.max(np.abs(cross))) if cross.size else 0.0
    if scale < 1e-12:
        lc = cholesky(cov_u1)
        z = rng.standard_normal((n_samples, mean_u1.shape[0]))
        return mean_u1 + z @ lc.lower.T, None

    n_a = min(100, q) if chain.n_a is None else chain.n_a
    plan = truncated.build_block_plan(cov_u2, n_a=n_a, max_sets=chain.max_sets)
    burn = 10 * plan.n_sets if chain.burn_in is None else chain.burn_in
    thin = chain.thin
    n_iter = burn + n_samples * thin
    u2, rate = truncated.mh_sample(
        mean=mean_u2, cov=None, plan=plan, n_iter=n_iter, burn_in=burn,
        seed=chain_ss, thin=thin,
    )
    u2 = u2[:n_samples]

    chol_u2 = cholesky(cov_u2)
    cr = chol_solve(chol_u2, cross.T).T     # Cov(U1,U2) Cov(U2)^{-1}
    schur = cov_u1 - cr @ cross.T
    schur = 0.5 * (schur + schur.T)
    chol_schur = cholesky(schur)
    z = rng.standard_normal((n_samples, mean_u1.shape[0]))
    u1 = mean_u1 + (u2 - mean_u2) @ cr.T + z @ chol_schur.lower.T
    return u1, rate


def predict(
    posterior: PosteriorCsn,
    n_samples: int = 1000,
    seed: int = 0,
    chain: ChainConfig = ChainConfig(),
) -> PredictionResult:
    """Sampling-based posterior summary: median, 10/90% bands and sd."""
    if n_samples < 100:
        raise ValueError("need at least 100 posterior samples")
    u1, rate = _sample_truncated_pair(
        posterior.cond_mean_u1,
        posterior.cond_cov_u1,
        posterior.cond_mean_u2,
        posterior.cond_cov_u2,
        posterior.cross_cov,
        n_samples,
        seed,
        chain,
    )
    return PredictionResult(
        median=np.median(u1, axis=0),
        q10=np.quantile(u1, 0.1, axis=0),
        q90=np.quantile(u1, 0.9, axis=0),
        sd=np.std(u1, axis=0, ddof=1),
        samples=u1,
        acceptance_rate=rate,
        grid=posterior.grid,
        n_vars=posterior.n_vars,
    )


def condition_on_well(
    posterior: PosteriorCsn, m_w: np.ndarray, well_indices: np.ndarray
) -> PosteriorCsn:
    """Exact further conditioning on U1[well] = m_w."""
    idx = np.asarray(well_indices, dtype=int)
    m_w = np.asarray(m_w, dtype=float)
    if idx.size == 0:
        return posterior
    if m_w.shape != idx.shape:
        raise ValueError("well values and indices must have the same length")
    cov_u1 = posterior.cond_cov_u1
    cross = posterior.cross_cov
    sig_ww = cov_u1[np.ix_(idx, idx)]
    try:
        chol_w = cholesky(sig_ww)
    except NotPositiveSemidefiniteError as exc:
        raise ConditioningDegenerateError(
            f"well-block covariance is singular: {exc}"
        ) from exc
    resid = m_w - posterior.cond_mean_u1[idx]
    cov_1w = cov_u1[:, idx]                  # Cov(U1, U1_w)
    cov_2w = cross[idx, :].T                 # Cov(U2, U1_w)
    k1 = chol_solve(chol_w, cov_1w.T).T
    k2 = chol_solve(chol_w, cov_2w.T).T
    new_cov_u1 = cov_u1 - k1 @ cov_1w.T
    new_cov_u2 = posterior.cond_cov_u2 - k2 @ cov_2w.T
    new_cross = cross - k1 @ cov_2w.T
    return PosteriorCsn(
        cond_mean_u1=posterior.cond_mean_u1 + k1 @ resid,
        cond_cov_u1=0.5 * (new_cov_u1 + new_cov_u1.T),
        cond_mean_u2=posterior.cond_mean_u2 + k2 @ resid,
        cond_cov_u2=0.5 * (new_cov_u2 + new_cov_u2.T),
        cross_cov=new_cross,
        grid=posterior.grid,
        n_vars=posterior.n_vars,
    )


def _marginal_obs_parts(prior: PriorSpec, obs: LinearObsModel, m_w, well_indices):
    """Gaussian log-density of the observed pair plus the U2-given-obs law."""
    if obs.d is None:
        raise ValueError("observation model carries no data vector")
    mu1, sigma1, sigma12, sigma2 = prior.blocks
    g = obs.G
    have_well = m_w is not None and well_indices is not None and len(well_indices) > 0
    if have_well:
        idx = np.asarray(well_indices, dtype=int)
        y = np.concatenate([obs.d, np.asarray(m_w, dtype=float)])
        mean_y = np.concatenate([g @ mu1, mu1[idx]])
        t1 = sigma1 @ g.T
        sigma_y = np.block(
            [
                [g @ t1 + obs.error_cov_dense(), t1[idx, :].T],
                [t1[idx, :], sigma1[np.ix_(idx, idx)]],
            ]
        )
        c_u2y = np.hstack([sigma12.T @ g.T, sigma12.T[:, idx]])
    else:
        y = obs.d
        mean_y = g @ mu1
        t1 = sigma1 @ g.T
        sigma_y = g @ t1 + obs.error_cov_dense()
        c_u2y = sigma12.T @ g.T
    sigma_y = 0.5 * (sigma_y + sigma_y.T)
    try:
        chol_y = cholesky(sigma_y)
    except NotPositiveSemidefiniteError as exc:
        raise ConditioningDegenerateError(
            f"observed-vector covariance is singular: {exc}"
        ) from exc
    r = y - mean_y
    w = chol_solve(chol_y, r)
    log_gauss = -0.5 * (y.size * LOG_2PI + chol_y.logdet + float(r @ w))
    if prior.is_gaussian:
        return log_gauss, None, None
    k2 = chol_solve(chol_y, c_u2y.T).T
    cond_mean = k2 @ r
    cond_cov = sigma2 - k2 @ c_u2y.T
    cond_cov = 0.5 * (cond_cov + cond_cov.T)
    return log_gauss, cond_mean, cond_cov


def marginal_loglik_obs(
    prior: PriorSpec,
    obs: LinearObsModel,
    m_w: np.ndarray | None,
    well_indices: np.ndarray | None,
    crn: CrnStream | None,
) -> float:
    """Log-density of the observed pair (d, m_w) under the skew prior.

    The observed vector is a linear image of (U1, e) conditioned on
    U2 <= 0, so its density is the Gaussian log-density times the ratio
    of two orthant probabilities, both estimated with the shared stream.
    Zero skewness short-circuits to the exact Gaussian value.
    """
    log_gauss, cond_mean, cond_cov = _marginal_obs_parts(prior, obs, m_w, well_indices)
    if cond_mean is None:
        return log_gauss
    if crn is None:
        raise ValueError("a CrnStream is required for nonzero skewness")
    sigma2 = prior.blocks[3]
    num = estimate_orthant(OrthantProblem.from_cov(cond_mean, cond_cov), crn)
    den = estimate_orthant(
        OrthantProblem.from_cov(np.zeros(sigma2.shape[0]), sigma2), crn
    )
    return log_gauss + num.log_value - den.log_value


@dataclass(frozen=True)
class FittedHyper:
    params: HyperParams
    loglik: float
    design_token: tuple
    gaussian: bool
    n_evals: int
    diagnostics: tuple = ()


@dataclass(frozen=True)
class HyperFitConfig:
    n_mc: int = 500
    n_starts: int = 3
    simplex_iters: int = 200
    newton_iters: int = 15
    crn_seed: int = 4_242
    fixed: dict | None = None       # blocks by name, e.g. {"sigma2_e": 0.1}
    gaussian: bool = False          # freeze gamma_vec at 0 and skip orthant work


# hyperparameter packing: every variance/range on log scale, gamma via atanh,
# sigma0 through its Cholesky factor (log diagonal, raw off-diagonal)

_SCALAR_LOG = ("sigma2_e", "d_w_e", "d_h_e", "d_v_e", "d_h_m", "d_v_m")


def _hp_pack(theta: HyperParams, free_names) -> np.ndarray:
    out = []
    for name in free_names:
        if name in _SCALAR_LOG:
            out.append(math.log(getattr(theta, name)))
        elif name == "mu0":
            out.extend(theta.mu0.tolist())
        elif name == "sigma0":
            low = np.linalg.cholesky(theta.sigma0)
            nv = theta.n_vars
            for i in range(nv):
                for j in range(i + 1):
                    out.append(math.log(low[i, j]) if i == j else low[i, j])
        elif name == "gamma_vec":
            out.extend(np.arctanh(np.clip(theta.gamma_vec, -GAMMA_CLAMP, GAMMA_CLAMP)))
        else:
            raise KeyError(name)
    return np.asarray(out, dtype=float)


def _hp_unpack(t: np.ndarray, free_names, base: HyperParams) -> HyperParams:
    values = dict(base.to_dict())
    nv = base.n_vars
    pos = 0
    for name in free_names:
        if name in _SCALAR_LOG:
            values[name] = math.exp(t[pos])
            pos += 1
        elif name == "mu0":
            values["mu0"] = t[pos:pos + nv].tolist()
            pos += nv
        elif name == "sigma0":
            low = np.zeros((nv, nv))
            for i in range(nv):
                for j in range(i + 1):
                    low[i, j] = math.exp(t[pos]) if i == j else t[pos]
                    pos += 1
            values["sigma0"] = (low @ low.T).tolist()
        elif name == "gamma_vec":
            values["gamma_vec"] = np.tanh(t[pos:pos + nv]).tolist()
            pos += nv
    return HyperParams.from_dict(values)


def _default_hyper_start(design: InversionDesign, d, m_w) -> HyperParams:
    nv = design.n_vars
    n_t = design.grid.n_rows
    if m_w is not None and len(m_w) == nv * n_t:
        per_var = np.asarray(m_w, dtype=float).reshape(nv, n_t)
        mu0 = per_var.mean(axis=1)
        var0 = np.maximum(per_var.var(axis=1, ddof=1), 1e-4)
    else:
        mu0 = np.zeros(nv)
        var0 = np.full(nv, 0.01)
    return HyperParams(
        sigma2_e=max(float(np.var(np.asarray(d), ddof=1)) * 0.5, 1e-6),
        d_w_e=0.5,
        d_h_e=5.0,
        d_v_e=5.0,
        mu0=mu0,
        sigma0=np.diag(var0),
        gamma_vec=np.zeros(nv),
        d_h_m=3.0,
        d_v_m=3.0,
    )


def fit_hyperparams(
    d: np.ndarray,
    m_w: np.ndarray | None,
    design: InversionDesign,
    config: HyperFitConfig = HyperFitConfig(),
) -> FittedHyper:
    """Maximum marginal likelihood over the full hyperparameter set.

    Fitting runs on the trace window around the well (the full-grid
    design stays the token for the common-design check).  `fixed` pins
    whole blocks by name; gaussian=True freezes gamma_vec at zero and
    never touches the orthant estimator.
    """
    sub, cols = design.windowed()
    d_sub = design.restrict_obs(d, cols)
    fixed = dict(config.fixed or {})
    if config.gaussian:
        fixed["gamma_vec"] = np.zeros(design.n_vars)

    all_names = [
        "sigma2_e", "d_w_e", "d_h_e", "d_v_e",
        "mu0", "sigma0", "gamma_vec", "d_h_m", "d_v_m",
    ]
    free_names = [n for n in all_names if n not in fixed]
    if not free_names:
        raise ValueError("no free hyperparameters to optimize")

    base = _default_hyper_start(sub, d_sub, m_w)
    base_dict = base.to_dict()
    for k, v in fixed.items():
        base_dict[k] = np.asarray(v).tolist() if hasattr(v, "tolist") else v
    base = HyperParams.from_dict(base_dict)

    q = sub.dim_field
    crn = None if config.gaussian else make_crn(config.crn_seed, config.n_mc, q)
    well_idx = sub.well_indices() if m_w is not None else None
    orthant_cache: dict[tuple, float] = {}

    def objective(t):
        theta = _hp_unpack(t, free_names, base)
        try:
            prior = theta.prior(sub)
            obs = LinearObsModel.build(sub, theta, d=d_sub)
            log_gauss, cond_mean, cond_cov = _marginal_obs_parts(
                prior, obs, m_w, well_idx
            )
            if cond_mean is None:
                return -log_gauss
            num = estimate_orthant(OrthantProblem.from_cov(cond_mean, cond_cov), crn)
            # the denominator orthant depends only on (gamma_vec, ranges)
            key = (tuple(theta.gamma_vec.tolist()), theta.d_h_m, theta.d_v_m)
            den = orthant_cache.get(key)
            if den is None:
                sigma2 = prior.blocks[3]
                den = estimate_orthant(
                    OrthantProblem.from_cov(np.zeros(sigma2.shape[0]), sigma2), crn
                ).log_value
                if len(orthant_cache) > 128:
                    orthant_cache.clear()
                orthant_cache[key] = den
            return -(log_gauss + num.log_value - den)
        except (NotPositiveSemidefiniteError, ConditioningDegenerateError, ValueError):
            return 1e300

    gamma_starts = [np.zeros(design.n_vars)]
    for mag in (0.5, -0.5):
        gamma_starts.append(np.full(design.n_vars, mag))
    results, diagnostics = [], []
    for k, gam in enumerate(gamma_starts[: config.n_starts]):
        start = base if "gamma_vec" in fixed else HyperParams.from_dict(
            {**base.to_dict(), "gamma_vec": gam.tolist()}
        )
        t0 = _hp_pack(start, free_names)
        try:
            res = two_phase_minimize(
                objective, t0,
                simplex_iters=config.simplex_iters,
                newton_iters=config.newton_iters,
            )
            if np.isfinite(res.fun) and res.fun < 1e299:
                results.append((res.fun, k, res))
            else:
                diagnostics.append(f"start {k}: no finite likelihood")
        except Exception as exc:  # noqa: BLE001
            diagnostics.append(f"start {k}: {exc}")
        if "gamma_vec" in fixed:
            break
    if not results:
        raise OptimizationFailureError(diagnostics)
    fun_best, _, best = min(results, key=lambda r: (r[0], r[1]))
    theta_hat = _hp_unpack(best.x, free_names, base)
    return FittedHyper(
        params=theta_hat,
        loglik=-fun_best,
        design_token=design.token,
        gaussian=config.gaussian,
        n_evals=sum(r[2].n_evals for r in results),
        diagnostics=tuple(diagnostics),
    )


def posterior_from_fit(
    fitted: FittedHyper, design: InversionDesign, d: np.ndarray
) -> PosteriorCsn:
    """Posterior on the design the parameters were fitted for."""
    if fitted.design_token != design.token:
        raise DesignMismatchError(
            f"parameters fitted for design {fitted.design_token} cannot be "
            f"applied to design {design.token}; refit on the common design"
        )
    prior = fitted.params.prior(design)
    obs = LinearObsModel.build(design, fitted.params, d=d)
    return posterior_csn(prior, obs)


@dataclass(frozen=True)
class SynthData:
    m_true: np.ndarray
    d: np.ndarray
    m_w: np.ndarray
    well_indices: np.ndarray


def synth_data(
    theta: HyperParams,
    design: InversionDesign,
    seed: int,
    chain: ChainConfig = ChainConfig(),
) -> SynthData:
    """Simulate a field from the prior and synthetic data d = G m + e."""
    prior = theta.prior(design)
    samples, _ = _prior_samples(prior, 1, seed, chain)
    m_true = samples[0]
    obs = LinearObsModel.build(design, theta)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(3)[2])
    if theta.sigma2_e > 0:
        chol_e = cholesky(obs.error_cov_dense())
        e = chol_e.lower @ rng.standard_normal(design.dim_obs)
    else:
        e = np.zeros(design.dim_obs)
    d = design.forward @ m_true + e
    idx = design.well_indices()
    return SynthData(m_true=m_true, d=d, m_w=m_true[idx], well_indices=idx)


def _prior_samples(prior: PriorSpec, n_samples, seed, chain: ChainConfig):
    mu1, sigma1, sigma12, sigma2 = prior.blocks
    return _sample_truncated_pair(
        mu1, sigma1, np.zeros(sigma2.shape[0]), sigma2, sigma12,
        max(n_samples, 1), seed, chain,
    )


def prior_predictive_samples(
    prior: PriorSpec, n_samples: int, seed: int, chain: ChainConfig = ChainConfig()
) -> np.ndarray:
    samples, _ = _prior_samples(prior, n_samples, seed, chain)
    return samples


def prior_quantile_bands(
    prior: PriorSpec, n_samples: int = 600, seed: int = 11, chain: ChainConfig = ChainConfig()
) -> tuple[np.ndarray, np.ndarray]:
    """(q10, q90) of the prior per site; analytic in the Gaussian case."""
    if prior.is_gaussian:
        mu1, sigma1, _, _ = prior.blocks
        sd = np.sqrt(np.diag(sigma1))
        return mu1 - _Z80 * sd, mu1 + _Z80 * sd
    samples = prior_predictive_samples(prior, n_samples, seed, chain)
    return np.quantile(samples, 0.1, axis=0), np.quantile(samples, 0.9, axis=0)


def evaluate(
    predictions: PredictionResult,
    truth: np.ndarray,
    prior_bands: tuple[np.ndarray, np.ndarray] | None = None,
    site_mask: np.ndarray | None = None,
) -> list[dict]:
    """MAE and band coverages per variable, against a known truth."""
    truth = np.asarray(truth, dtype=float)
    if truth.shape != predictions.median.shape:
        raise ValueError("truth length does not match predictions")
    p_s = predictions.grid.p
    names = var_names(predictions.n_vars)
    out = []
    for v, name in enumerate(names):
        sl = slice(v * p_s, (v + 1) * p_s)
        keep = np.ones(p_s, dtype=bool) if site_mask is None else site_mask[sl]
        t = truth[sl][keep]
        med = predictions.median[sl][keep]
        lo = predictions.q10[sl][keep]
        hi = predictions.q90[sl][keep]
        row = {
            "variable": name,
            "mae": float(np.mean(np.abs(med - t))),
            "posterior_coverage": float(np.mean((t >= lo) & (t <= hi))),
        }
        if prior_bands is not None:
            plo = prior_bands[0][sl][keep]
            phi = prior_bands[1][sl][keep]
            row["prior_coverage"] = float(np.mean((t >= plo) & (t <= phi)))
        out.append(row)
    return out


# ---------------------------------------------------------------------------
# file formats (CSV observation/well files, prediction tables)


def write_observations(path, d: np.ndarray, design: InversionDesign) -> None:
    cube = np.asarray(d, dtype=float).reshape(
        design.n_angles, design.grid.n_cols, design.grid.n_rows
    )
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["angle", "trace", "time_index", "value"])
        for k, ang in enumerate(design.angles_deg):
            for trace in range(design.grid.n_cols):
                for t in range(design.grid.n_rows):
                    w.writerow([f"{ang:g}", trace, t, repr(float(cube[k, trace, t]))])


def read_observations(path, design: InversionDesign) -> np.ndarray:
    """Observation vector in angle-major layout; strict about every row."""
    cube = np.full((design.n_angles, design.grid.n_cols, design.grid.n_rows), np.nan)
    angle_index = {f"{a:g}": i for i, a in enumerate(design.angles_deg)}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:4]] != ["angle", "trace", "time_index", "value"]:
            raise DataFormatError(f"{path}: line 1: expected header angle,trace,time_index,value")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                key = f"{float(row[0]):g}"
                k = angle_index[key]
                trace = int(row[1])
                t = int(row[2])
                cube[k, trace, t] = float(row[3])
            except (KeyError, ValueError, IndexError) as exc:
                raise DataFormatError(f"{path}: line {lineno}: bad observation row {row!r}") from exc
    if np.isnan(cube).any():
        missing = int(np.isnan(cube).sum())
        raise DataFormatError(f"{path}: {missing} grid cells have no observation")
    return cube.reshape(-1)


def write_well(path, m_w: np.ndarray, design: InversionDesign) -> None:
    names = var_names(design.n_vars)
    n_t = design.grid.n_rows
    vals = np.asarray(m_w, dtype=float).reshape(design.n_vars, n_t)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variable", "time_index", "value"])
        for v, name in enumerate(names):
            for t in range(n_t):
                w.writerow([name, t, repr(float(vals[v, t]))])


def read_well(path, design: InversionDesign) -> np.ndarray:
    names = {n: i for i, n in enumerate(var_names(design.n_vars))}
    n_t = design.grid.n_rows
    vals = np.full((design.n_vars, n_t), np.nan)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["variable", "time_index", "value"]:
            raise DataFormatError(f"{path}: line 1: expected header variable,time_index,value")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                v = names[row[0].strip()]
                t = int(row[1])
                vals[v, t] = float(row[2])
            except (KeyError, ValueError, IndexError) as exc:
                raise DataFormatError(f"{path}: line {lineno}: bad well row {row!r}") from exc
    if np.isnan(vals).any():
        raise DataFormatError(f"{path}: incomplete well trace")
    return vals.reshape(-1)


def write_predictions(path, pred: PredictionResult, design: InversionDesign) -> None:
    names = var_names(design.n_vars)
    p_s = design.grid.p
    rows_idx, cols_idx = design.grid.rows_cols()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variable", "row", "col", "median", "q10", "q90", "sd"])
        for v, name in enumerate(names):
            off = v * p_s
            for s in range(p_s):
                w.writerow(
                    [
                        name,
                        int(rows_idx[s]),
                        int(cols_idx[s]),
                        repr(float(pred.median[off + s])),
                        repr(float(pred.q10[off + s])),
                        repr(float(pred.q90[off + s])),
                        repr(float(pred.sd[off + s])),
                    ]
                )
