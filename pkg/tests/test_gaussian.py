"""Dense Gaussian core: correlation matrices, factorization, conditioning."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csnfield.errors import ConditioningDegenerateError, NotPositiveSemidefiniteError
from csnfield.gaussian import (
    CholFactor,
    GaussianSplit,
    GridSpec,
    SequentialConditioner,
    cholesky,
    conditional_gaussian,
    exp_correlation_matrix,
    kronecker_cov,
    mvn_logpdf,
    norm_logcdf,
    norm_pdf_cdf,
    sequential_conditionals,
)
from conftest import random_spd


class TestGridSpec:
    def test_column_major_site_order(self):
        g = GridSpec(n_rows=3, n_cols=2)
        assert g.p == 6
        assert g.site_index(0, 0) == 0
        assert g.site_index(2, 0) == 2
        assert g.site_index(0, 1) == 3
        assert g.site_coords(4) == (1, 1)

    def test_site_order_is_bijection(self):
        g = GridSpec(n_rows=4, n_cols=5)
        seen = {g.site_index(r, c) for r in range(4) for c in range(5)}
        assert seen == set(range(20))

    def test_rejects_bad_dims(self):
        with pytest.raises(ValueError):
            GridSpec(n_rows=0, n_cols=3)
        with pytest.raises(ValueError):
            GridSpec(n_rows=2, n_cols=2, spacing_v=0.0)


class TestExpCorrelation:
    def test_single_site(self):
        g = GridSpec(1, 1)
        c = exp_correlation_matrix(g, 2.0, 7.0)
        np.testing.assert_array_equal(c, [[1.0]])

    def test_zero_range_is_identity(self):
        # white-noise limit of the study's second case
        g = GridSpec(1, 2)
        np.testing.assert_array_equal(exp_correlation_matrix(g, 0.0, 0.0), np.eye(2))

    def test_two_sites_range_three(self):
        g = GridSpec(1, 2)
        c = exp_correlation_matrix(g, 3.0, 3.0)
        assert c[0, 1] == pytest.approx(math.exp(-1.0 / 3.0), abs=1e-15)
        np.testing.assert_array_equal(np.diag(c), [1.0, 1.0])

    def test_matches_direct_formula(self, rng):
        g = GridSpec(n_rows=4, n_cols=3, spacing_v=0.5, spacing_h=2.0)
        c = exp_correlation_matrix(g, d_h=4.0, d_v=1.5)
        for _ in range(20):
            i, j = rng.integers(0, g.p, size=2)
            ri, ci = g.site_coords(int(i))
            rj, cj = g.site_coords(int(j))
            expect = math.exp(
                -abs(ci - cj) * 2.0 / 4.0 - abs(ri - rj) * 0.5 / 1.5
            )
            assert c[i, j] == pytest.approx(expect, rel=1e-14)

    def test_rejects_negative_range(self):
        g = GridSpec(2, 2)
        with pytest.raises(ValueError):
            exp_correlation_matrix(g, -1.0, 1.0)

    @settings(max_examples=25, deadline=None)
    @given(
        n_rows=st.integers(1, 8),
        n_cols=st.integers(1, 8),
        d_h=st.floats(0.1, 50.0),
        d_v=st.floats(0.1, 50.0),
    )
    def test_always_psd(self, n_rows, n_cols, d_h, d_v):
        g = GridSpec(n_rows=n_rows, n_cols=n_cols)
        c = exp_correlation_matrix(g, d_h, d_v)
        factor = cholesky(c)
        assert factor.jitter_used <= 1e-10

    def test_psd_on_large_grid(self):
        g = GridSpec(32, 32)
        factor = cholesky(exp_correlation_matrix(g, 3.0, 5.0))
        assert factor.jitter_used <= 1e-10


class TestCholesky:
    def test_identity(self):
        f = cholesky(np.eye(3))
        np.testing.assert_array_equal(f.lower, np.eye(3))
        assert f.jitter_used == 0.0

    def test_hand_factorization(self):
        f = cholesky(np.array([[4.0, 2.0], [2.0, 5.0]]))
        np.testing.assert_allclose(f.lower, [[2.0, 0.0], [1.0, 2.0]], atol=1e-14)
        np.testing.assert_allclose(f.lower @ f.lower.T, [[4, 2], [2, 5]], atol=1e-12)

    def test_indefinite_raises_with_pivot(self):
        m = np.diag([1.0, -0.1, 2.0])
        with pytest.raises(NotPositiveSemidefiniteError) as exc:
            cholesky(m)
        assert exc.value.pivot == 2  # LAPACK 1-based pivot of the failing minor

    def test_jitter_repairs_semidefinite(self):
        # rank-1 matrix: plain factorization fails, jitter succeeds
        v = np.array([1.0, 2.0, 3.0])
        m = np.outer(v, v)
        f = cholesky(m)
        assert f.jitter_used > 0.0
        np.testing.assert_allclose(f.lower @ f.lower.T, m, atol=1e-5)

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError, match="symmetric"):
            cholesky(np.array([[1.0, 0.5], [0.0, 1.0]]))


class TestConditionalGaussian:
    def test_independent_blocks_unchanged(self):
        split = GaussianSplit(
            mean_a=np.array([1.0, -1.0]),
            mean_b=np.array([0.5]),
            cov_aa=np.eye(2) * 2.0,
            cov_ab=np.zeros((2, 1)),
            cov_bb=np.eye(1),
        )
        mean, cov = conditional_gaussian(split, np.array([3.0]))
        np.testing.assert_array_equal(mean, [1.0, -1.0])
        np.testing.assert_array_equal(cov, np.eye(2) * 2.0)

    def test_bivariate_textbook(self):
        split = GaussianSplit(
            mean_a=np.zeros(1),
            mean_b=np.zeros(1),
            cov_aa=np.eye(1),
            cov_ab=np.array([[0.5]]),
            cov_bb=np.eye(1),
        )
        mean, cov = conditional_gaussian(split, np.array([1.0]))
        assert mean[0] == pytest.approx(0.5, abs=1e-14)
        assert cov[0, 0] == pytest.approx(0.75, abs=1e-14)

    def test_full_dependence_degenerates(self):
        split = GaussianSplit(
            mean_a=np.zeros(1),
            mean_b=np.zeros(1),
            cov_aa=np.eye(1),
            cov_ab=np.array([[1.0]]),
            cov_bb=np.eye(1),
        )
        mean, cov = conditional_gaussian(split, np.array([2.3]))
        assert mean[0] == pytest.approx(2.3, abs=1e-12)
        assert abs(cov[0, 0]) < 1e-10

    def test_singular_conditioning_block(self):
        split = GaussianSplit(
            mean_a=np.zeros(1),
            mean_b=np.zeros(2),
            cov_aa=np.eye(1),
            cov_ab=np.array([[0.1, 0.1]]),
            cov_bb=-np.eye(2),
        )
        with pytest.raises(ConditioningDegenerateError):
            conditional_gaussian(split, np.array([0.0, 0.0]))

    def test_compose_twice_equals_once(self, rng):
        # condition on b, then on a2 (part of a) == condition on (a2, b) jointly
        for trial in range(10):
            n = int(rng.integers(4, 11))
            cov = random_spd(rng, n)
            mean = rng.standard_normal(n)
            n_b = int(rng.integers(1, n - 2)) if n > 3 else 1
            n_a2 = 1
            obs_b = rng.standard_normal(n_b)
            obs_a2 = rng.standard_normal(n_a2)
            ia = np.arange(n - n_b)          # a block
            ib = np.arange(n - n_b, n)       # b block

            split1 = GaussianSplit(
                mean_a=mean[ia], mean_b=mean[ib],
                cov_aa=cov[np.ix_(ia, ia)], cov_ab=cov[np.ix_(ia, ib)],
                cov_bb=cov[np.ix_(ib, ib)],
            )
            m1, c1 = conditional_gaussian(split1, obs_b)
            # now condition the tail of a on its first coordinate
            keep = np.arange(n_a2, len(ia))
            split2 = GaussianSplit(
                mean_a=m1[keep], mean_b=m1[:n_a2],
                cov_aa=c1[np.ix_(keep, keep)], cov_ab=c1[np.ix_(keep, np.arange(n_a2))],
                cov_bb=c1[np.ix_(np.arange(n_a2), np.arange(n_a2))],
            )
            m2, c2 = conditional_gaussian(split2, obs_a2)

            iu = np.concatenate([ia[:n_a2], ib])   # union conditioning set
            ik = ia[keep]
            split_joint = GaussianSplit(
                mean_a=mean[ik], mean_b=mean[iu],
                cov_aa=cov[np.ix_(ik, ik)], cov_ab=cov[np.ix_(ik, iu)],
                cov_bb=cov[np.ix_(iu, iu)],
            )
            mj, cj = conditional_gaussian(split_joint, np.concatenate([obs_a2, obs_b]))
            np.testing.assert_allclose(m2, mj, atol=1e-9)
            np.testing.assert_allclose(c2, cj, atol=1e-9)


class TestSequentialConditionals:
    def test_first_coordinate_unconditional(self):
        cov = np.array([[4.0, 1.0], [1.0, 2.0]])
        f = cholesky(cov)
        cm, sd = sequential_conditionals(f, np.array([3.0, -1.0]), np.array([]), 0)
        assert cm == pytest.approx(3.0)
        assert sd == pytest.approx(2.0)

    def test_identity_independence(self, rng):
        f = cholesky(np.eye(5))
        mean = rng.standard_normal(5)
        prefix = rng.standard_normal(3)
        cm, sd = sequential_conditionals(f, mean, prefix, 3)
        assert cm == pytest.approx(mean[3])
        assert sd == pytest.approx(1.0)

    def test_bivariate_correlation_08(self):
        cov = np.array([[1.0, 0.8], [0.8, 1.0]])
        f = cholesky(cov)
        cm, sd = sequential_conditionals(f, np.zeros(2), np.array([-1.0]), 1)
        assert cm == pytest.approx(-0.8, abs=1e-12)
        assert sd == pytest.approx(0.6, abs=1e-12)

    def test_index_out_of_range(self):
        f = cholesky(np.eye(2))
        with pytest.raises(ValueError):
            sequential_conditionals(f, np.zeros(2), np.zeros(2), 2)
        with pytest.raises(ValueError):
            sequential_conditionals(f, np.zeros(2), np.zeros(0), 1)

    def test_chain_reconstructs_joint_logpdf(self, rng):
        for n in (3, 17, 50):
            cov = random_spd(rng, n)
            mean = rng.standard_normal(n)
            x = rng.standard_normal(n)
            f = cholesky(cov)
            cond = SequentialConditioner(f, mean)
            total = 0.0
            for i in range(n):
                cm, sd = cond.next_conditional()
                total += -0.5 * math.log(2 * math.pi * sd * sd) - 0.5 * ((x[i] - cm) / sd) ** 2
                cond.push(x[i])
            assert total == pytest.approx(mvn_logpdf(x, mean, f), abs=1e-8)


class TestKroneckerCov:
    def test_identity_factors(self):
        h = kronecker_cov(np.eye(1), np.eye(2), np.eye(3))
        np.testing.assert_array_equal(h.dense(), np.eye(6))

    def test_dense_matches_brute_force(self, rng):
        a = random_spd(rng, 2)
        b = random_spd(rng, 2)
        c = random_spd(rng, 2)
        h = kronecker_cov(a, b, c)
        np.testing.assert_allclose(h.dense(), np.kron(a, np.kron(b, c)), atol=1e-12)

    def test_matvec_matches_dense(self, rng):
        a = random_spd(rng, 3)
        b = random_spd(rng, 4)
        c = random_spd(rng, 5)
        h = kronecker_cov(a, b, c, scale=1.7)
        v = rng.standard_normal(60)
        np.testing.assert_allclose(h.matvec(v), h.dense() @ v, atol=1e-10)

    def test_dense_symmetric(self, rng):
        h = kronecker_cov(random_spd(rng, 2), random_spd(rng, 3), random_spd(rng, 2))
        d = h.dense()
        assert np.max(np.abs(d - d.T)) < 1e-12

    def test_shape_mismatch(self):
        h = kronecker_cov(np.eye(2), np.eye(2), np.eye(2))
        with pytest.raises(ValueError):
            h.matvec(np.zeros(7))


class TestNormPdfCdf:
    def test_standard_at_zero(self):
        pdf, cdf = norm_pdf_cdf(0.0, 0.0, 1.0)
        assert pdf == pytest.approx(0.3989422804014327, abs=1e-15)
        assert cdf == 0.5

    def test_at_mean_nonunit_var(self):
        _, cdf = norm_pdf_cdf(3.0, 3.0, 4.0)
        assert cdf == 0.5

    def test_against_high_precision_erf(self):
        import mpmath

        mpmath.mp.dps = 40
        for x in [-8.0, -1.96, -0.5, 0.3, 2.2, 6.0]:
            _, cdf = norm_pdf_cdf(x, 0.0, 1.0)
            exact = float(mpmath.ncdf(x))
            assert abs(cdf - exact) <= 1e-12

    def test_minus_196(self):
        _, cdf = norm_pdf_cdf(-1.96, 0.0, 1.0)
        assert cdf == pytest.approx(0.024997895148220435, abs=1e-12)

    def test_var_domain(self):
        with pytest.raises(ValueError):
            norm_pdf_cdf(0.0, 0.0, 0.0)

    def test_log_cdf_deep_tail(self):
        # far below -37 the plain cdf underflows; the log path must not
        val = float(norm_logcdf(-60.0))
        assert np.isfinite(val)
        assert val == pytest.approx(-0.5 * 60.0**2, rel=0.01)

    def test_log_cdf_matches_log_of_cdf_in_normal_range(self):
        for x in [-5.0, -1.0, 0.0, 1.5]:
            _, cdf = norm_pdf_cdf(x, 0.0, 1.0)
            assert float(norm_logcdf(x)) == pytest.approx(math.log(cdf), abs=1e-12)
