"""Orthant probability estimator against analytic anchors and oracles."""

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from csnfield.errors import NumericalDegeneracyError
from csnfield.gaussian import CholFactor
from csnfield.orthant import (
    OrthantProblem,
    default_shift,
    estimate_orthant,
    log_orthant_ratio,
    make_crn,
)
from conftest import random_spd


def quad_oracle_2d(cov) -> float:
    """Adaptive quadrature of the bivariate normal over the negative quadrant."""
    from scipy.integrate import dblquad

    rv = multivariate_normal(mean=[0.0, 0.0], cov=cov)
    val, _ = dblquad(
        lambda y, x: rv.pdf([x, y]), -8.0, 0.0, lambda x: -8.0, lambda x: 0.0,
        epsabs=1e-10,
    )
    return val


class TestCrnStream:
    def test_same_seed_bit_identical(self):
        a = make_crn(42, 100, 5)
        b = make_crn(42, 100, 5)
        np.testing.assert_array_equal(a.uniforms, b.uniforms)

    def test_different_seeds_differ(self):
        a = make_crn(1, 10, 3)
        b = make_crn(2, 10, 3)
        assert a.uniforms[0, 0] != b.uniforms[0, 0]

    def test_open_interval(self):
        u = make_crn(7, 5000, 4).uniforms
        assert np.all(u > 0.0)
        assert np.all(u < 1.0)

    def test_zero_dim_rejected(self):
        with pytest.raises(ValueError):
            make_crn(1, 10, 0)
        with pytest.raises(ValueError):
            make_crn(1, 0, 2)


class TestDefaultShift:
    def test_diagonal_gives_zero(self):
        np.testing.assert_array_equal(default_shift(np.diag([1.0, 2.0, 0.5])), np.zeros(3))

    def test_equicorrelated_09(self):
        cov = np.array([[1.0, 0.9], [0.9, 1.0]])
        np.testing.assert_allclose(default_shift(cov), [-1.62, -1.62], atol=1e-12)

    def test_scalar_problem(self):
        np.testing.assert_array_equal(default_shift(np.array([[2.0]])), [0.0])

    def test_magnitude_override(self):
        cov = np.array([[1.0, 0.9], [0.9, 1.0]])
        np.testing.assert_allclose(default_shift(cov, magnitude=1.0), [-0.9, -0.9])


class TestEstimateOrthant:
    def test_univariate_half(self):
        est = estimate_orthant(
            OrthantProblem.from_cov([0.0], [[1.0]], shift=np.zeros(1)),
            make_crn(0, 10_000, 1),
        )
        assert est.value == pytest.approx(0.5, abs=3 * max(est.std_error, 1e-12) + 1e-12)

    def test_independence_two_to_minus_n(self):
        est = estimate_orthant(
            OrthantProblem.from_cov(np.zeros(4), np.eye(4)), make_crn(3, 10_000, 4)
        )
        assert est.value == pytest.approx(2.0**-4, abs=3 * max(est.std_error, 1e-12) + 1e-12)

    def test_bivariate_third(self):
        # arcsine law: 1/4 + arcsin(1/2) / (2 pi) = 1/3, cross-checked by quadrature
        cov = np.array([[1.0, 0.5], [0.5, 1.0]])
        analytic = 0.25 + np.arcsin(0.5) / (2 * np.pi)
        assert analytic == pytest.approx(1.0 / 3.0, abs=1e-12)
        assert quad_oracle_2d(cov) == pytest.approx(1.0 / 3.0, abs=1e-7)
        est = estimate_orthant(OrthantProblem.from_cov(np.zeros(2), cov), make_crn(5, 50_000, 2))
        assert est.value == pytest.approx(1.0 / 3.0, abs=3 * est.std_error)

    def test_matches_genz_oracle_on_random_problems(self, rng):
        # the scipy cdf is an independent implementation (quasi-MC quadrature)
        for trial in range(20):
            n = int(rng.integers(2, 7))
            cov = random_spd(rng, n)
            mean = rng.uniform(-1.0, 1.0, size=n)
            est = estimate_orthant(
                OrthantProblem.from_cov(mean, cov), make_crn(100 + trial, 20_000, n)
            )
            oracle = float(
                multivariate_normal(mean=mean, cov=cov).cdf(
                    np.zeros(n), abseps=1e-8, releps=1e-8
                )
            )
            tol = 4.0 * est.std_error + 1e-6
            assert est.value == pytest.approx(oracle, abs=tol)

    def test_variance_reduction_from_shift(self):
        n = 10
        cov = 0.1 * np.eye(n) + 0.9 * np.ones((n, n))
        ratios = []
        for seed in range(10):
            crn = make_crn(seed, 4000, n)
            with_shift = estimate_orthant(OrthantProblem.from_cov(np.zeros(n), cov), crn)
            no_shift = estimate_orthant(
                OrthantProblem.from_cov(np.zeros(n), cov, shift=np.zeros(n)), crn
            )
            ratios.append(with_shift.rel_std_error / no_shift.rel_std_error)
        assert np.median(ratios) < 1.0

    def test_std_error_shrinks_with_n(self):
        cov = np.array([[1.0, 0.6, 0.3], [0.6, 1.0, 0.6], [0.3, 0.6, 1.0]])
        problem = OrthantProblem.from_cov(np.zeros(3), cov)
        ratios = []
        for seed in range(7):
            small = estimate_orthant(problem, make_crn(seed, 1000, 3))
            big = estimate_orthant(problem, make_crn(seed, 4000, 3))
            ratios.append(big.std_error / small.std_error)
        assert np.median(ratios) < 1.0

    def test_deterministic_given_stream(self):
        cov = random_spd(np.random.default_rng(1), 5)
        problem = OrthantProblem.from_cov(np.zeros(5), cov)
        crn = make_crn(9, 5000, 5)
        a = estimate_orthant(problem, crn)
        b = estimate_orthant(problem, crn)
        assert a.log_value == b.log_value
        assert a.std_error == b.std_error

    def test_samples_inside_orthant_large_dim(self, rng):
        # log-space survives dimensions where the probability underflows
        n = 300
        cov = 0.2 * np.eye(n) + 0.8 * np.exp(
            -np.abs(np.subtract.outer(np.arange(n), np.arange(n))) / 5.0
        )
        est = estimate_orthant(OrthantProblem.from_cov(np.zeros(n), cov), make_crn(2, 500, n))
        assert np.isfinite(est.log_value)
        assert est.log_value < 0
        assert np.isfinite(est.rel_std_error)

    def test_dim_mismatch(self):
        problem = OrthantProblem.from_cov(np.zeros(3), np.eye(3))
        with pytest.raises(ValueError):
            estimate_orthant(problem, make_crn(0, 100, 2))

    def test_degenerate_scale_raises(self):
        # conditional sd underflow makes the weight nonfinite
        chol = CholFactor(lower=np.array([[1e-200]]), jitter_used=0.0)
        problem = OrthantProblem(mean=np.array([50.0]), chol=chol, shift=np.zeros(1))
        with pytest.raises(NumericalDegeneracyError):
            estimate_orthant(problem, make_crn(0, 100, 1))


class TestLogOrthantRatio:
    def test_identical_problems_shared_stream(self):
        cov = random_spd(np.random.default_rng(3), 4)
        problem = OrthantProblem.from_cov(np.zeros(4), cov)
        crn = make_crn(11, 2000, 4)
        assert log_orthant_ratio(problem, problem, crn) == 0.0

    def test_univariate_different_seeds_near_zero(self):
        problem = OrthantProblem.from_cov([0.0], [[1.0]])
        r = log_orthant_ratio(
            problem, problem, make_crn(1, 20_000, 1), make_crn(2, 20_000, 1)
        )
        assert abs(r) < 0.05

    def test_independence_factorization_cancels(self):
        # equal-size independent problems have ratio ~ 0 on shared streams,
        # the zero-skewness cancellation in the field density
        n = 6
        num = OrthantProblem.from_cov(np.zeros(n), np.eye(n))
        den = OrthantProblem.from_cov(np.zeros(n), np.eye(n))
        crn = make_crn(8, 5000, n)
        assert log_orthant_ratio(num, den, crn) == pytest.approx(0.0, abs=1e-12)
