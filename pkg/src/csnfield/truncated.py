"""Block Metropolis-Hastings sampling from I(x <= 0) * phi_n(x; mu, Sigma).

Each iteration picks one precomputed block (a set of coordinates chosen
as the most correlated with an anchor), proposes new block values by
sequentially drawing every coordinate from its zero-truncated univariate
conditional given the block prefix and the complement, and accepts with

    alpha = min{1, prod_i Phi1(0 | x'_{1:i-1}, x_b) / prod_i Phi1(0 | x_{1:i-1}, x_b)}

computed in log space.  Proposals are inside the orthant by construction,
so every state of the chain satisfies x <= 0 exactly.  Single-coordinate
blocks are rejection-free.

Block conditionals come from the precision matrix: for block a with
complement b, x_a | x_b is Gaussian with covariance inv(Q_aa) and mean
mu_a - inv(Q_aa) Q_ab (x_b - mu_b).  The chain keeps g = Q (x - mu)
cached so each proposal costs O(n_a^2) instead of O(n_a n).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import log_ndtr, ndtri_exp

from .gaussian import CholFactor, cholesky, chol_solve

__all__ = [
    "BlockSet",
    "BlockPlan",
    "TruncChainState",
    "build_block_plan",
    "propose_block",
    "acceptance_prob",
    "mh_sample",
    "init_state",
]

# refresh the cached g = Q (x - mu) after this many accepted moves to stop
# incremental rounding drift
_G_REFRESH_EVERY = 2000

_U_EPS = 2.0**-53


@dataclass(frozen=True)
class BlockSet:
    """One update block: member indices plus its conditional factors."""

    indices: np.ndarray          # ascending linear site indices, len <= n_a
    anchor: int
    q_aa_chol: CholFactor        # factor of the block precision Q_aa
    cond_chol: np.ndarray        # lower Cholesky factor of inv(Q_aa)


@dataclass(frozen=True)
class BlockPlan:
    """Immutable proposal plan shared by all chains on one covariance."""

    n: int
    n_a: int
    sets: tuple[BlockSet, ...]
    precision: np.ndarray        # Q = inv(cov), symmetric

    @property
    def n_sets(self) -> int:
        return len(self.sets)


@dataclass
class TruncChainState:
    """Mutable chain state; x stays inside the orthant at every step."""

    x: np.ndarray
    mean: np.ndarray
    g: np.ndarray                # cached Q (x - mean)
    step_count: int = 0
    accept_count: int = 0
    _accepts_since_refresh: int = field(default=0, repr=False)


def build_block_plan(cov: np.ndarray, n_a: int, max_sets: int | None = None) -> BlockPlan:
    """Precompute block membership and conditional factors.

    Blocks gather the n_a indices most correlated (by absolute
    correlation) with each anchor, ties broken by smaller linear index.
    Anchors are spread evenly over the site order; any site left
    uncovered gets its own extra anchor so the union of sets is complete.
    """
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    n = cov.shape[0]
    if not 1 <= n_a <= n:
        raise ValueError(f"block size {n_a} must be in [1, {n}]")
    if max_sets is None:
        max_sets = math.ceil(n / n_a) * 4
    if max_sets < 1:
        raise ValueError("max_sets must be >= 1")

    sd = np.sqrt(np.diag(cov))
    corr = cov / np.outer(sd, sd)
    order_keys = np.arange(n)

    def members_for(anchor: int) -> np.ndarray:
        order = np.lexsort((order_keys, -np.abs(corr[anchor])))
        return np.sort(order[:n_a])

    anchors = np.unique(np.round(np.linspace(0, n - 1, min(max_sets, n))).astype(int))
    sets_members = [members_for(a) for a in anchors]
    anchor_list = list(anchors)

    covered = np.zeros(n, dtype=bool)
    for m in sets_members:
        covered[m] = True
    while not covered.all():
        extra = int(np.argmin(covered))
        m = members_for(extra)
        sets_members.append(m)
        anchor_list.append(extra)
        covered[m] = True

    chol_cov = cholesky(cov)
    eye = np.eye(n)
    q = chol_solve(chol_cov, eye)
    q = 0.5 * (q + q.T)

    sets = []
    for anchor, idx in zip(anchor_list, sets_members):
        q_aa = q[np.ix_(idx, idx)]
        q_aa_chol = cholesky(q_aa)
        cond_cov = chol_solve(q_aa_chol, np.eye(len(idx)))
        cond_cov = 0.5 * (cond_cov + cond_cov.T)
        cond_chol = cholesky(cond_cov).lower
        sets.append(
            BlockSet(indices=idx, anchor=int(anchor), q_aa_chol=q_aa_chol, cond_chol=cond_chol)
        )
    return BlockPlan(n=n, n_a=n_a, sets=tuple(sets), precision=q)


def init_state(mean: np.ndarray, plan: BlockPlan, x0: np.ndarray | None = None) -> TruncChainState:
    """Strictly feasible starting state; default x_i = min(-1e-3, mu_i)."""
    mean = np.asarray(mean, dtype=float)
    if x0 is None:
        x = np.minimum(-1e-3, mean)
    else:
        x = np.asarray(x0, dtype=float).copy()
        if np.any(x > 0):
            raise ValueError("initial state must satisfy x <= 0")
    g = plan.precision @ (x - mean)
    return TruncChainState(x=x, mean=mean, g=g)


def _block_cond_mean(state: TruncChainState, block: BlockSet) -> np.ndarray:
    idx = block.indices
    delta = state.x[idx] - state.mean[idx]
    r = state.g[idx]
    return state.mean[idx] + delta - chol_solve(block.q_aa_chol, r)


def _seq_log_normalizers(block: BlockSet, cond_mean: np.ndarray, values: np.ndarray) -> float:
    """sum_i log Phi1(0 | prefix values, complement) for the given block values."""
    lower = block.cond_chol
    d = np.diag(lower)
    z = solve_triangular(lower, values - cond_mean, lower=True)
    seq_means = values - d * z
    return float(np.sum(log_ndtr(-seq_means / d)))


def propose_block(state: TruncChainState, block: BlockSet, rng: np.random.Generator) -> np.ndarray:
    """Draw block values sequentially from zero-truncated conditionals.

    Coordinates are visited in ascending linear index; every returned
    entry is <= 0.
    """
    cond_mean = _block_cond_mean(state, block)
    lower = block.cond_chol
    k = len(block.indices)
    u = np.clip(rng.random(k), _U_EPS, 1.0 - _U_EPS)
    z = np.empty(k)
    out = np.empty(k)
    for i in range(k):
        m_i = cond_mean[i] + float(lower[i, :i] @ z[:i])
        s_i = lower[i, i]
        log_p = float(log_ndtr(-m_i / s_i))
        z[i] = float(ndtri_exp(math.log(u[i]) + log_p))
        out[i] = m_i + s_i * z[i]
    return out


def acceptance_prob(state: TruncChainState, block: BlockSet, proposal: np.ndarray) -> float:
    """min{1, product ratio of the sequential truncation normalizers}."""
    cond_mean = _block_cond_mean(state, block)
    log_num = _seq_log_normalizers(block, cond_mean, np.asarray(proposal, dtype=float))
    log_den = _seq_log_normalizers(block, cond_mean, state.x[block.indices])
    return float(np.exp(min(0.0, log_num - log_den)))


def mh_sample(
    mean: np.ndarray,
    cov: np.ndarray | None,
    plan: BlockPlan,
    n_iter: int,
    burn_in: int,
    seed: int,
    thin: int = 1,
    x0: np.ndarray | None = None,
) -> tuple[np.ndarray, float]:
    """Run the block MH chain and return (samples, acceptance_rate).

    Anchors are picked uniformly at random among the plan's sets.  States
    are recorded after burn_in, every `thin` iterations.  The same seed
    reproduces the chain exactly.
    """
    if burn_in < 0 or n_iter <= burn_in:
        raise ValueError("need n_iter > burn_in >= 0")
    if thin < 1:
        raise ValueError("thin must be >= 1")
    mean = np.asarray(mean, dtype=float)
    if mean.shape != (plan.n,):
        raise ValueError("mean length does not match plan dimension")

    rng = np.random.default_rng(seed)
    state = init_state(mean, plan, x0=x0)
    q = plan.precision
    kept = []
    for it in range(n_iter):
        block = plan.sets[int(rng.integers(plan.n_sets))]
        proposal = propose_block(state, block, rng)
        alpha = acceptance_prob(state, block, proposal)
        if rng.random() < alpha:
            idx = block.indices
            state.g += q[idx].T @ (proposal - state.x[idx])
            state.x[idx] = proposal
            state.accept_count += 1
            state._accepts_since_refresh += 1
            if state._accepts_since_refresh >= _G_REFRESH_EVERY:
                state.g = q @ (state.x - mean)
                state._accepts_since_refresh = 0
        state.step_count += 1
        if it >= burn_in and (it - burn_in) % thin == 0:
            kept.append(state.x.copy())
    samples = np.asarray(kept)
    return samples, state.accept_count / state.step_count
