"""Dense Gaussian linear algebra shared by every other module.

Covers regular-lattice exponential correlation matrices, Cholesky
factorization with a centralized jitter-repair policy, Gaussian
conditioning (block form and sequential univariate form), Kronecker
structured covariances, and the univariate normal pdf/cdf with a
log-safe tail path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import reduce
from math import sqrt, log, pi

import numpy as np
from scipy.linalg import solve_triangular, cho_solve
from scipy.linalg.lapack import dpotrf
from scipy.special import ndtr, log_ndtr

from .errors import NotPositiveSemidefiniteError, ConditioningDegenerateError

__all__ = [
    "GridSpec",
    "CholFactor",
    "GaussianSplit",
    "SequentialConditioner",
    "KroneckerCov",
    "exp_correlation_matrix",
    "axis_correlation",
    "cholesky",
    "chol_solve",
    "chol_logdet",
    "conditional_gaussian",
    "sequential_conditionals",
    "kronecker_cov",
    "norm_pdf_cdf",
    "norm_logcdf",
    "mvn_logpdf",
]

LOG_2PI = log(2.0 * pi)

# Relative jitter ladder applied to the mean diagonal when a plain
# factorization fails; shared by every module so PSD repair is uniform.
_JITTER_LADDER = (1e-12, 1e-11, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


@dataclass(frozen=True)
class GridSpec:
    """Regular 2D lattice with a fixed column-major site enumeration.

    Sites are numbered column by column (all rows of column 0 first, then
    column 1, and so on).  Every module relies on this single ordering so
    that index arithmetic is consistent across correlation matrices,
    sequential conditioning and Kronecker products.
    """

    n_rows: int
    n_cols: int
    spacing_v: float = 1.0
    spacing_h: float = 1.0

    def __post_init__(self):
        if self.n_rows < 1 or self.n_cols < 1:
            raise ValueError("grid dimensions must be positive")
        if self.spacing_v <= 0 or self.spacing_h <= 0:
            raise ValueError("grid spacings must be positive")

    @property
    def p(self) -> int:
        return self.n_rows * self.n_cols

    def site_index(self, row: int, col: int) -> int:
        if not (0 <= row < self.n_rows and 0 <= col < self.n_cols):
            raise ValueError(f"site ({row}, {col}) outside grid")
        return col * self.n_rows + row

    def site_coords(self, index: int) -> tuple[int, int]:
        if not 0 <= index < self.p:
            raise ValueError(f"site index {index} outside grid")
        return index % self.n_rows, index // self.n_rows

    def rows_cols(self) -> tuple[np.ndarray, np.ndarray]:
        """(row, col) coordinates of every site, in site order."""
        idx = np.arange(self.p)
        return idx % self.n_rows, idx // self.n_rows

    def interior_sites(self, margin: int | None = None) -> np.ndarray:
        """Linear indices of sites at least `margin` sites from the border.

        Default margin is min(5, side // 8), never swallowing the whole
        grid; falls back to every site on tiny grids.
        """
        if margin is None:
            margin = min(5, min(self.n_rows, self.n_cols) // 8)
        rows, cols = self.rows_cols()
        keep = (
            (rows >= margin)
            & (rows < self.n_rows - margin)
            & (cols >= margin)
            & (cols < self.n_cols - margin)
        )
        if not keep.any():
            return np.arange(self.p)
        return np.nonzero(keep)[0]


@dataclass(frozen=True)
class CholFactor:
    """Lower-triangular Cholesky factor plus the diagonal jitter used."""

    lower: np.ndarray
    jitter_used: float = 0.0

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def logdet(self) -> float:
        """Log-determinant of the factored matrix L L^T."""
        return 2.0 * float(np.sum(np.log(np.diag(self.lower))))


@dataclass(frozen=True)
class GaussianSplit:
    """Blocks of a jointly Gaussian (a, b) pair."""

    mean_a: np.ndarray
    mean_b: np.ndarray
    cov_aa: np.ndarray
    cov_ab: np.ndarray
    cov_bb: np.ndarray


def axis_correlation(n: int, spacing: float, corr_range: float) -> np.ndarray:
    """1D exponential correlation matrix along one lattice axis.

    A range of exactly 0 is the identity-matrix limit (white noise along
    the axis); negative or nonfinite ranges are rejected.
    """
    if not np.isfinite(corr_range) or corr_range < 0:
        raise ValueError(f"correlation range must be finite and >= 0, got {corr_range}")
    if n < 1:
        raise ValueError("axis length must be positive")
    if corr_range == 0.0:
        return np.eye(n)
    dist = np.abs(np.subtract.outer(np.arange(n), np.arange(n))) * spacing
    return np.exp(-dist / corr_range)


def exp_correlation_matrix(grid: GridSpec, d_h: float, d_v: float) -> np.ndarray:
    """Exponential correlation matrix on a regular grid, in site order.

    Entry (i, j) is exp(-|dcol| * spacing_h / d_h - |drow| * spacing_v / d_v).
    Separability makes this the Kronecker product of the horizontal and
    vertical axis factors under the column-major site enumeration.
    """
    c_h = axis_correlation(grid.n_cols, grid.spacing_h, d_h)
    c_v = axis_correlation(grid.n_rows, grid.spacing_v, d_v)
    return np.kron(c_h, c_v)


def cholesky(m: np.ndarray, sym_tol: float = 1e-8) -> CholFactor:
    """Lower Cholesky factor with an escalating diagonal jitter retry.

    Jitter starts at 1e-12 of the mean diagonal and escalates to 1e-6.
    Raises NotPositiveSemidefiniteError (naming the failing pivot) when
    the largest jitter still fails.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if m.shape[0] < 1:
        raise ValueError("matrix dimension must be >= 1")
    scale = max(np.max(np.abs(m)), 1.0)
    if np.max(np.abs(m - m.T)) > sym_tol * scale:
        raise ValueError("matrix is not symmetric")

    mean_diag = float(np.mean(np.diag(m)))
    jitter_base = abs(mean_diag) if mean_diag != 0.0 else 1.0
    last_info = 0
    for rel in (0.0,) + _JITTER_LADDER:
        jitter = rel * jitter_base
        attempt = m if jitter == 0.0 else m + jitter * np.eye(m.shape[0])
        c, info = dpotrf(attempt, lower=1, clean=1, overwrite_a=0)
        if info == 0:
            return CholFactor(lower=c, jitter_used=jitter)
        last_info = info
    raise NotPositiveSemidefiniteError(pivot=int(last_info), jitter_tried=jitter)


def chol_solve(chol: CholFactor, b: np.ndarray) -> np.ndarray:
    """Solve (L L^T) x = b given the factor."""
    return cho_solve((chol.lower, True), b)


def chol_logdet(chol: CholFactor) -> float:
    return chol.logdet


def conditional_gaussian(
    split: GaussianSplit, observed_b: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of a | b = observed_b.

    mean = mean_a + cov_ab cov_bb^{-1} (observed_b - mean_b)
    cov  = cov_aa - cov_ab cov_bb^{-1} cov_ab^T  (symmetrized)
    """
    observed_b = np.asarray(observed_b, dtype=float)
    try:
        cb = cholesky(split.cov_bb)
    except NotPositiveSemidefiniteError as exc:
        raise ConditioningDegenerateError(
            f"covariance of the conditioning block is singular: {exc}"
        ) from exc
    # k = cov_bb^{-1} cov_ab^T, shape (n_b, n_a)
    k = chol_solve(cb, split.cov_ab.T)
    mean = split.mean_a + k.T @ (observed_b - split.mean_b)
    cov = split.cov_aa - split.cov_ab @ k
    cov = 0.5 * (cov + cov.T)
    return mean, cov


class SequentialConditioner:
    """Incremental univariate conditionals of N(mean, L L^T).

    Feeding coordinates one at a time keeps each step O(i): the running
    innovation vector z satisfies x = mean + L z over the fed prefix.
    """

    def __init__(self, chol: CholFactor, mean: np.ndarray):
        self._lower = chol.lower
        self._mean = np.asarray(mean, dtype=float)
        if self._mean.shape != (chol.dim,):
            raise ValueError("mean length does not match factor dimension")
        self._z = np.empty(chol.dim)
        self._i = 0

    @property
    def position(self) -> int:
        return self._i

    def next_conditional(self) -> tuple[float, float]:
        """(cond_mean, cond_sd) of the next coordinate given the fed prefix."""
        i = self._i
        if i >= self._lower.shape[0]:
            raise ValueError("all coordinates already conditioned")
        cm = self._mean[i] + float(self._lower[i, :i] @ self._z[:i])
        return cm, float(self._lower[i, i])

    def push(self, value: float) -> None:
        """Record the realized value of the current coordinate."""
        cm, sd = self.next_conditional()
        self._z[self._i] = (value - cm) / sd
        self._i += 1


def sequential_conditionals(
    chol: CholFactor, mean: np.ndarray, values_prefix: np.ndarray, index: int
) -> tuple[float, float]:
    """Exact conditional of coordinate `index` given coordinates 0..index-1.

    `index` is 0-based and `values_prefix` must have length `index`.  This
    is the stateless surface; hot loops use SequentialConditioner, which
    amortizes the prefix solve.
    """
    values_prefix = np.asarray(values_prefix, dtype=float)
    if not 0 <= index < chol.dim:
        raise ValueError(f"coordinate index {index} out of range for dim {chol.dim}")
    if values_prefix.shape != (index,):
        raise ValueError("values_prefix must have length equal to index")
    cond = SequentialConditioner(chol, mean)
    for v in values_prefix:
        cond.push(float(v))
    return cond.next_conditional()


@dataclass(frozen=True)
class KroneckerCov:
    """Covariance given as scale * (F_1 kron F_2 kron ... kron F_k).

    Factor order matches the global site enumeration: the first factor
    varies slowest.  Supports matvec without materialization and dense
    materialization at desk scale.
    """

    factors: tuple[np.ndarray, ...]
    scale: float = 1.0

    def __post_init__(self):
        for f in self.factors:
            if f.ndim != 2 or f.shape[0] != f.shape[1]:
                raise ValueError("Kronecker factors must be square matrices")

    @property
    def dim(self) -> int:
        n = 1
        for f in self.factors:
            n *= f.shape[0]
        return n

    def matvec(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != (self.dim,):
            raise ValueError(f"vector length {v.shape} does not match dim {self.dim}")
        shape = tuple(f.shape[0] for f in self.factors)
        x = v.reshape(shape)
        for axis, f in enumerate(self.factors):
            x = np.moveaxis(np.tensordot(f, x, axes=([1], [axis])), 0, axis)
        return self.scale * x.reshape(-1)

    def dense(self) -> np.ndarray:
        return self.scale * reduce(np.kron, self.factors)


def kronecker_cov(
    sigma0: np.ndarray, c_h: np.ndarray, c_v: np.ndarray, scale: float = 1.0
) -> KroneckerCov:
    """sigma0 kron c_h kron c_v, ordered variable-major then column-major."""
    sigma0 = np.atleast_2d(np.asarray(sigma0, dtype=float))
    return KroneckerCov(factors=(sigma0, np.asarray(c_h), np.asarray(c_v)), scale=scale)


def norm_pdf_cdf(x: float, mean: float = 0.0, var: float = 1.0) -> tuple[float, float]:
    """Univariate normal pdf and cdf at x for N(mean, var)."""
    if var <= 0:
        raise ValueError(f"variance must be positive, got {var}")
    sd = sqrt(var)
    z = (x - mean) / sd
    pdf = np.exp(-0.5 * z * z) / (sd * sqrt(2.0 * pi))
    return float(pdf), float(ndtr(z))


def norm_logcdf(x, mean=0.0, var=1.0):
    """log Phi((x - mean)/sd); safe far below -37 where the cdf underflows."""
    var = np.asarray(var, dtype=float)
    if np.any(var <= 0):
        raise ValueError("variance must be positive")
    return log_ndtr((np.asarray(x, dtype=float) - mean) / np.sqrt(var))


def mvn_logpdf(x: np.ndarray, mean: np.ndarray, chol: CholFactor) -> float:
    """Multivariate normal log-density using a precomputed factor."""
    r = np.asarray(x, dtype=float) - np.asarray(mean, dtype=float)
    w = solve_triangular(chol.lower, r, lower=True)
    return -0.5 * (chol.dim * LOG_2PI + chol.logdet + float(w @ w))
