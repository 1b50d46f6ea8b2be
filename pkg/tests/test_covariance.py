import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffsmooth.covariance import (CovMatrix, ExponentialKernel, JitterWarning, build_cov, chol_sample,
                                   corr_inversion_threshold, kernel_eval, spd_logdet, spd_solve)
from diffsmooth.errors import DomainError, NumericalError
from diffsmooth.geodata import pairwise_distances


def gauss_elim_solve(m, b):
    """Naive Gaussian elimination with partial pivoting (oracle)."""
    a = [list(map(float, row)) + [float(bi)] for row, bi in zip(m, b)]
    n = len(a)
    for col in range(n):
        piv = max(range(col, n), key=lambda r: abs(a[r][col]))
        a[col], a[piv] = a[piv], a[col]
        for r in range(col + 1, n):
            f = a[r][col] / a[col][col]
            for c in range(col, n + 1):
                a[r][c] -= f * a[col][c]
    x = [0.0] * n
    for r in reversed(range(n)):
        x[r] = (a[r][n] - sum(a[r][c] * x[c] for c in range(r + 1, n))) / a[r][r]
    return np.array(x)


class TestKernel:
    def test_zero_distance(self):
        assert kernel_eval(ExponentialKernel(4.0, 12.7), 0.0) == 4.0

    def test_correlation_at_sqrt2_over_6(self):
        k = ExponentialKernel(1.0, 12.7)
        assert kernel_eval(k, math.sqrt(2) / 6) == pytest.approx(0.0500, abs=2e-4)
        # strictly below 0.05 from 0.2359 on
        assert kernel_eval(k, 0.2359) < 0.05

    def test_scalar_oracle(self):
        expected = 4.0 * math.exp(-12.7 * 0.13)
        assert kernel_eval(ExponentialKernel(4.0, 12.7), 0.13) == pytest.approx(expected, rel=1e-15)
        assert expected == pytest.approx(4.0 * math.exp(-1.651), rel=1e-15)

    @given(st.floats(0, 50), st.floats(1e-6, 10))
    def test_strictly_decreasing(self, d1, gap):
        k = ExponentialKernel(2.0, 0.7)
        assert k(d1) > k(d1 + gap)

    def test_rejects_bad_params(self):
        with pytest.raises(DomainError):
            ExponentialKernel(0.0, 1.0)
        with pytest.raises(DomainError):
            ExponentialKernel(1.0, -1.0)


class TestBuildCov:
    def test_single_point(self):
        c = build_cov(ExponentialKernel(2.5, 3.0), np.zeros((1, 1)))
        assert c.m.shape == (1, 1) and c.m[0, 0] == 2.5

    def test_elementwise_oracle(self):
        rng = np.random.default_rng(0)
        locs = rng.random((5, 2))
        k = ExponentialKernel(1.7, 4.2)
        c = build_cov(k, pairwise_distances(locs))
        for i in range(5):
            for j in range(5):
                dist = math.hypot(*(locs[i] - locs[j]))
                assert c.m[i, j] == pytest.approx(1.7 * math.exp(-4.2 * dist), rel=1e-13)
        assert np.all(np.diag(c.m) == 1.7)

    def test_duplicates_need_jitter(self):
        locs = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]])
        c = build_cov(ExponentialKernel(1.0, 1.0), pairwise_distances(locs))
        assert np.linalg.matrix_rank(c.m) == 2
        with pytest.warns(JitterWarning):
            L = c.chol
        assert c.jitter > 0
        np.testing.assert_allclose(L @ L.T, c.m + c.jitter * np.eye(3), atol=1e-12)

    def test_failure_names_minor(self):
        m = np.array([[1.0, 2.0], [2.0, 1.0]])
        with pytest.raises(NumericalError, match="leading minor 2"):
            CovMatrix(m).chol

    def test_permutation_invariance(self):
        rng = np.random.default_rng(4)
        locs = rng.random((12, 2))
        perm = rng.permutation(12)
        k = ExponentialKernel(3.0, 5.0)
        a = build_cov(k, pairwise_distances(locs[perm])).m
        b = build_cov(k, pairwise_distances(locs)).m[np.ix_(perm, perm)]
        np.testing.assert_array_equal(a, b)


class TestThreshold:
    def test_published_threshold_value(self):
        M = corr_inversion_threshold(12.7, 0.20)
        assert M == pytest.approx(0.126728, abs=1e-6)
        assert round(M, 2) == 0.13

    def test_analytic(self):
        assert corr_inversion_threshold(1.0, math.exp(-1)) == pytest.approx(1.0, rel=1e-15)

    def test_limit(self):
        assert corr_inversion_threshold(2.0, 1 - 1e-12) < 1e-11

    @pytest.mark.parametrize("rho", [0.0, 1.0, -0.2, 1.5])
    def test_domain(self, rho):
        with pytest.raises(DomainError):
            corr_inversion_threshold(1.0, rho)

    @given(st.floats(1e-3, 1 - 1e-3), st.floats(0.1, 100))
    def test_composition_identity(self, rho, phi):
        k = ExponentialKernel(1.0, phi)
        assert k.correlation(corr_inversion_threshold(phi, rho)) == pytest.approx(rho, abs=1e-12)


class TestLinearAlgebra:
    def test_identity(self):
        c = CovMatrix(np.eye(4))
        b = np.array([1.0, -2.0, 3.0, 0.5])
        np.testing.assert_array_equal(spd_solve(c, b), b)
        assert spd_logdet(c) == 0.0

    def test_solve_against_elimination(self):
        rng = np.random.default_rng(7)
        B = rng.normal(size=(4, 4))
        m = B @ B.T + 0.5 * np.eye(4)
        b = rng.normal(size=4)
        c = CovMatrix(m)
        x = spd_solve(c, b)
        np.testing.assert_allclose(x, gauss_elim_solve(m, b), rtol=1e-8, atol=1e-8)
        assert np.linalg.norm(m @ x - b) / np.linalg.norm(b) <= 1e-10

    def test_logdet(self):
        rng = np.random.default_rng(8)
        B = rng.normal(size=(5, 5))
        m = B @ B.T + np.eye(5)
        sign, ld = np.linalg.slogdet(m)
        assert spd_logdet(CovMatrix(m)) == pytest.approx(ld, rel=1e-12)

    def test_zero_noise_returns_mean(self):
        c = CovMatrix(np.array([[2.0, 0.5], [0.5, 1.0]]))
        mean = np.array([3.0, -1.0])
        np.testing.assert_array_equal(chol_sample(c, mean, z=np.zeros(2)), mean)

    def test_empirical_covariance(self):
        m = np.array([[2.0, 0.6, -0.3], [0.6, 1.0, 0.2], [-0.3, 0.2, 0.5]])
        c = CovMatrix(m)
        rng = np.random.default_rng(11)
        n = 100_000
        draws = c.chol @ rng.standard_normal((3, n))
        emp = np.cov(draws)
        # standard error of a sample covariance: sqrt((m_ii m_jj + m_ij^2) / n)
        se = np.sqrt((np.outer(np.diag(m), np.diag(m)) + m ** 2) / n)
        assert np.all(np.abs(emp - m) <= 3 * se)
