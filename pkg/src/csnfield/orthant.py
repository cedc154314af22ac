"""Monte Carlo estimation of normal orthant probabilities.

Estimates P(X <= 0) for X ~ N(mu, Sigma) by importance sampling with a
sequentially conditioned proposal: coordinate i is drawn from the
zero-truncated univariate conditional of N(mu + eta, Sigma) given the
previously drawn coordinates, via inverse cdf on a reusable uniform
stream.  The mean shift eta pushes the proposal into the orthant, which
cuts weight variance when the correlation structure is strong.

With x = (mu + eta) + L z and a = L^{-1} eta, the log weight of sample j
reduces to

    log w_j = -a . z_j - 0.5 |a|^2 + sum_i log Phi1(0 | x_{1:i-1}; mu+eta, Sigma)

accumulated fully in log space so dimensions in the thousands survive.
Reusing one CrnStream across calls makes the estimate a smooth,
deterministic function of (mu, Sigma).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import log_ndtr, ndtri_exp

from .errors import NumericalDegeneracyError
from .gaussian import CholFactor, cholesky

__all__ = [
    "CrnStream",
    "OrthantProblem",
    "OrthantEstimate",
    "make_crn",
    "default_shift",
    "estimate_orthant",
    "log_orthant_ratio",
]


@dataclass(frozen=True)
class CrnStream:
    """A frozen block of uniforms reused across estimator evaluations."""

    seed: int
    n_samples: int
    dim: int
    uniforms: np.ndarray

    def __eq__(self, other):
        return (
            isinstance(other, CrnStream)
            and (self.seed, self.n_samples, self.dim)
            == (other.seed, other.n_samples, other.dim)
        )

    def __hash__(self):
        return hash((self.seed, self.n_samples, self.dim))


def make_crn(seed: int, n_samples: int, dim: int) -> CrnStream:
    """Deterministic N x dim uniform array strictly inside (0, 1)."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if dim < 1:
        raise ValueError("dim must be >= 1")
    rng = np.random.default_rng(seed)
    u = rng.random((n_samples, dim))
    # random() yields [0, 1); clamp the zero corner so logs stay finite
    np.clip(u, 2.0**-53, 1.0 - 2.0**-53, out=u)
    u.setflags(write=False)
    return CrnStream(seed=seed, n_samples=n_samples, dim=dim, uniforms=u)


def default_shift(cov: np.ndarray, magnitude: float = 1.8) -> np.ndarray:
    """Proposal mean shift eta_i = -magnitude * Sigma_ii * w_i.

    w_i is the mean absolute off-diagonal correlation of row i, so a
    diagonal covariance gets no shift and a strongly coupled one gets the
    full -magnitude * Sigma_ii.
    """
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    n = cov.shape[0]
    var = np.diag(cov)
    if n == 1:
        return np.zeros(1)
    sd = np.sqrt(var)
    corr = cov / np.outer(sd, sd)
    abs_off = np.abs(corr) - np.eye(n)
    w = abs_off.sum(axis=1) / (n - 1)
    return -magnitude * var * np.clip(w, 0.0, 1.0)


@dataclass(frozen=True)
class OrthantProblem:
    """Mean, covariance factor and proposal shift for one orthant integral."""

    mean: np.ndarray
    chol: CholFactor
    shift: np.ndarray

    def __post_init__(self):
        n = self.chol.dim
        if self.mean.shape != (n,) or self.shift.shape != (n,):
            raise ValueError("mean/shift length must match the factor dimension")
        if not np.all(np.isfinite(self.shift)):
            raise ValueError("shift must be finite")

    @property
    def dim(self) -> int:
        return self.chol.dim

    @classmethod
    def from_cov(
        cls,
        mean: np.ndarray,
        cov: np.ndarray,
        shift: np.ndarray | None = None,
        shift_magnitude: float = 1.8,
    ) -> "OrthantProblem":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        if shift is None:
            shift = default_shift(cov, magnitude=shift_magnitude)
        return cls(mean=mean, chol=cholesky(cov), shift=np.asarray(shift, dtype=float))

    @classmethod
    def from_chol(
        cls, mean: np.ndarray, chol: CholFactor, shift: np.ndarray | None = None,
        shift_magnitude: float = 1.8,
    ) -> "OrthantProblem":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        if shift is None:
            cov = chol.lower @ chol.lower.T
            shift = default_shift(cov, magnitude=shift_magnitude)
        return cls(mean=mean, chol=chol, shift=np.asarray(shift, dtype=float))


@dataclass(frozen=True)
class OrthantEstimate:
    """log of the estimated probability plus linear-scale standard error.

    rel_std_error is the coefficient of variation of the sample mean; it
    stays meaningful when the probability itself underflows the linear
    scale.
    """

    log_value: float
    std_error: float
    n_used: int
    rel_std_error: float = np.nan

    @property
    def value(self) -> float:
        return float(np.exp(self.log_value))


def estimate_orthant(problem: OrthantProblem, crn: CrnStream) -> OrthantEstimate:
    """Importance-sampling estimate of P(X <= 0), X ~ N(mean, L L^T).

    Deterministic for a fixed (problem, crn) pair.  Samples are built
    inside the orthant by construction, so no indicator ever rejects.
    """
    n = problem.dim
    if crn.dim != n:
        raise ValueError(f"stream dim {crn.dim} does not match problem dim {n}")
    big_n = crn.n_samples
    lower = problem.chol.lower
    mu_shift = problem.mean + problem.shift
    log_u = np.log(crn.uniforms)

    z = np.empty((big_n, n))
    log_w = np.zeros(big_n)
    for i in range(n):
        m = mu_shift[i] + z[:, :i] @ lower[i, :i]
        s = lower[i, i]
        log_p = log_ndtr(-m / s)
        zi = ndtri_exp(log_u[:, i] + log_p)
        bad = ~np.isfinite(zi)
        if bad.any():
            raise NumericalDegeneracyError(sample=int(np.argmax(bad)), index=i)
        z[:, i] = zi
        log_w += log_p

    a = solve_triangular(lower, problem.shift, lower=True)
    log_w -= z @ a + 0.5 * float(a @ a)

    m_max = float(np.max(log_w))
    w_tilde = np.exp(log_w - m_max)
    mean_tilde = float(np.mean(w_tilde))
    if big_n > 1:
        se_tilde = float(np.std(w_tilde, ddof=1)) / np.sqrt(big_n)
    else:
        se_tilde = 0.0
    log_value = m_max + np.log(mean_tilde)
    with np.errstate(over="ignore", under="ignore"):
        std_error = float(np.exp(m_max) * se_tilde)
    if not np.isfinite(std_error):
        std_error = float(np.exp(np.log(se_tilde) + m_max)) if se_tilde > 0 else 0.0
    rel = se_tilde / mean_tilde if mean_tilde > 0 else np.inf
    return OrthantEstimate(
        log_value=float(log_value),
        std_error=std_error,
        n_used=big_n,
        rel_std_error=float(rel),
    )


def log_orthant_ratio(
    numerator: OrthantProblem,
    denominator: OrthantProblem,
    crn: CrnStream,
    crn_denominator: CrnStream | None = None,
) -> float:
    """log estimate of numerator minus log estimate of denominator.

    Sharing one stream (crn_denominator=None) makes identical problems
    cancel exactly.
    """
    den_crn = crn if crn_denominator is None else crn_denominator
    num = estimate_orthant(numerator, crn)
    den = estimate_orthant(denominator, den_crn)
    return num.log_value - den.log_value
