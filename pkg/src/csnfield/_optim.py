"""Two-phase optimization shared by the likelihood fitters.

A Nelder-Mead pass explores from each start, then BFGS with custom
central-difference gradients polishes in the same (transformed)
coordinates.  Gradients use a relative step of 1e-4, Hessians 1e-3,
both central, matching the finite-difference policy used throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

__all__ = ["OptResult", "central_grad", "central_hessian", "two_phase_minimize"]

GRAD_REL_STEP = 1e-4
HESS_REL_STEP = 1e-3


@dataclass
class OptResult:
    x: np.ndarray
    fun: float
    n_evals: int
    message: str
    success: bool


def _steps(x: np.ndarray, rel: float) -> np.ndarray:
    return rel * np.maximum(np.abs(x), 0.1)


def central_grad(fun, x: np.ndarray, rel: float = GRAD_REL_STEP) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    h = _steps(x, rel)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h[i]
        g[i] = (fun(x + e) - fun(x - e)) / (2.0 * h[i])
    return g


def central_hessian(fun, x: np.ndarray, rel: float = HESS_REL_STEP, steps=None) -> np.ndarray:
    """Central-difference Hessian; `steps` overrides the per-coordinate step."""
    x = np.asarray(x, dtype=float)
    n = x.size
    h = _steps(x, rel) if steps is None else np.asarray(steps, dtype=float)
    hess = np.empty((n, n))
    f0 = fun(x)
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h[i]
        hess[i, i] = (fun(x + ei) - 2.0 * f0 + fun(x - ei)) / (h[i] * h[i])
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = h[j]
            fpp = fun(x + ei + ej)
            fpm = fun(x + ei - ej)
            fmp = fun(x - ei + ej)
            fmm = fun(x - ei - ej)
            hess[i, j] = hess[j, i] = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j])
    return hess


def two_phase_minimize(
    fun,
    x0: np.ndarray,
    simplex_iters: int = 150,
    newton_iters: int = 25,
) -> OptResult:
    """Nelder-Mead then gradient polish, both counting function evaluations."""
    counter = {"n": 0}

    def counted(t):
        counter["n"] += 1
        v = fun(np.asarray(t, dtype=float))
        # optimizers dislike nan; map infeasible points to a huge finite value
        if not np.isfinite(v):
            return 1e300
        return float(v)

    nm = minimize(
        counted,
        np.asarray(x0, dtype=float),
        method="Nelder-Mead",
        options={"maxiter": simplex_iters, "xatol": 1e-4, "fatol": 1e-6},
    )
    polish = minimize(
        counted,
        nm.x,
        method="BFGS",
        jac=lambda t: central_grad(counted, t),
        options={"maxiter": newton_iters, "gtol": 1e-5},
    )
    best = polish if polish.fun <= nm.fun else nm
    return OptResult(
        x=np.asarray(best.x, dtype=float),
        fun=float(best.fun),
        n_evals=counter["n"],
        message=str(best.message),
        success=bool(np.isfinite(best.fun)),
    )
