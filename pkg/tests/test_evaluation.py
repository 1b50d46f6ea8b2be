import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from diffsmooth.errors import DimensionMismatchError, ValidationError
from diffsmooth.evaluation import (combine_partially_synthetic, compare_reports, fit_analyst_regression, ols,
                                   real_data_intervals, relative_reduction, risk_within_epsilon,
                                   risk_within_percent, utility_report)
from diffsmooth.geodata import GeoDataset
from diffsmooth.synthesis import SyntheticCollection


def _ds(y, seed=0):
    n = len(y)
    locs = np.random.default_rng(seed).random((n, 2))
    return GeoDataset(locs, y, np.ones((n, 1)))


class TestRisk:
    def test_exact_copies(self):
        ds = _ds([1.0, 2.0, 3.0])
        syn = SyntheticCollection(np.tile(ds.responses, (4, 1)), ds.record_ids)
        r = risk_within_epsilon(syn, ds, 1e-9, scale="log")
        np.testing.assert_array_equal(r.fractions, 1.0)

    def test_huge_epsilon(self):
        ds = _ds([1.0, 2.0])
        syn = SyntheticCollection(np.random.default_rng(0).normal(size=(10, 2)), ds.record_ids)
        np.testing.assert_array_equal(risk_within_epsilon(syn, ds, 1e300, scale="log").fractions, 1.0)

    def test_original_scale_counts(self):
        ds = _ds([math.log(100.0), math.log(50.0)])
        reps = np.log(np.array([[105.0, 50.0], [120.0, 70.0], [95.0, 45.0], [100.0, 56.0]]))
        syn = SyntheticCollection(reps, ds.record_ids)
        r = risk_within_epsilon(syn, ds, 10.0)
        np.testing.assert_allclose(r.fractions, [0.75, 0.75])
        p = risk_within_percent(syn, ds, 0.10)
        np.testing.assert_allclose(p.fractions, [0.75, 0.5])

    def test_percent_equals_epsilon_on_log_scale(self):
        rng = np.random.default_rng(4)
        ds = _ds(rng.uniform(1, 3, 6))
        syn = SyntheticCollection(ds.responses + rng.normal(scale=0.2, size=(50, 6)), ds.record_ids)
        p = risk_within_percent(syn, ds, 0.07, scale="log")
        for i in range(6):
            e = risk_within_epsilon(syn, ds, abs(ds.responses[i]) * 0.07, scale="log")
            assert p.fractions[i] == e.fractions[i]

    def test_zero_truth_excluded(self):
        ds = _ds([0.0, 1.0])
        syn = SyntheticCollection(np.zeros((3, 2)), ds.record_ids)
        with pytest.warns(RuntimeWarning):
            r = risk_within_percent(syn, ds, 0.1, scale="log")
        assert math.isnan(r.fractions[0]) and not r.included[0]
        assert r.group_means()["all"] == 0.0

    def test_groups_and_reduction(self):
        ds = _ds([1.0, 1.0, 1.0])
        before = SyntheticCollection(np.ones((4, 3)), ds.record_ids)
        after = SyntheticCollection(np.array([[1, 1, 9], [1, 9, 9], [9, 9, 9], [9, 9, 9.0]]), ds.record_ids)
        mask = [True, False, False]
        rb = risk_within_epsilon(before, ds, 0.5, "log", mask)
        ra = risk_within_epsilon(after, ds, 0.5, "log", mask)
        cmp = compare_reports(rb, ra)
        np.testing.assert_allclose(cmp["per_record"], [0.5, 0.75, 1.0])
        assert cmp["groups"]["at_risk"] == 0.5
        assert cmp["groups"]["not_at_risk"] == pytest.approx(1 - 0.125)
        assert math.isnan(relative_reduction(0.0, 0.1))

    def test_record_permutation_invariance(self):
        rng = np.random.default_rng(1)
        ds = _ds(rng.normal(size=5))
        reps = ds.responses + rng.normal(size=(30, 5))
        perm = rng.permutation(5)
        ds_p = GeoDataset(ds.locations[perm], ds.responses[perm], ds.covariates[perm],
                          record_ids=tuple(np.array(ds.record_ids)[perm].tolist()))
        a = risk_within_epsilon(SyntheticCollection(reps, ds.record_ids), ds, 0.5, "log")
        b = risk_within_epsilon(SyntheticCollection(reps[:, perm], ds_p.record_ids), ds_p, 0.5, "log")
        np.testing.assert_array_equal(a.fractions[perm], b.fractions)
        c = risk_within_epsilon(SyntheticCollection(reps[::-1], ds.record_ids), ds, 0.5, "log")
        np.testing.assert_array_equal(a.fractions, c.fractions)

    def test_mismatch(self):
        ds = _ds([1.0, 2.0])
        with pytest.raises(DimensionMismatchError):
            risk_within_epsilon(SyntheticCollection(np.zeros((2, 3)), (0, 1, 2)), ds, 1.0)

    def test_bad_tolerance(self):
        ds = _ds([1.0, 2.0])
        syn = SyntheticCollection(np.zeros((2, 2)), ds.record_ids)
        with pytest.raises(ValidationError):
            risk_within_epsilon(syn, ds, 0.0)
        with pytest.raises(ValidationError):
            risk_within_percent(syn, ds, -1.0)


class TestCombination:
    def test_hand_example(self):
        r = combine_partially_synthetic([1, 2, 3], [1, 1, 1])
        assert (r.qbar, r.b, r.ubar) == (2.0, 1.0, 1.0)
        assert r.T == 1.0 + 1.0 / 3.0
        assert r.df == 2 * (1 + 3) ** 2
        half = stats.t.ppf(0.975, 32) * math.sqrt(4 / 3)
        assert r.lower == pytest.approx(2 - half, rel=1e-14)

    def test_zero_between_variance(self):
        r = combine_partially_synthetic([0.7] * 5, [0.04] * 5)
        assert r.qbar == 0.7 and r.b == 0.0 and r.T == 0.04
        assert r.upper - r.qbar == pytest.approx(stats.norm.ppf(0.975) * 0.2, rel=1e-14)

    def test_needs_two(self):
        with pytest.raises(ValidationError):
            combine_partially_synthetic([1.0], [1.0])

    @settings(max_examples=100)
    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=30), st.floats(0, 10))
    def test_interval_invariants(self, q, u):
        r = combine_partially_synthetic(q, [u] * len(q))
        assert r.lower <= r.qbar <= r.upper
        assert r.T >= r.ubar
        assert r.T == pytest.approx(r.ubar + r.b / r.L)

    def test_interval_widens_with_between_variance(self):
        narrow = combine_partially_synthetic([1.9, 2.0, 2.1], [1, 1, 1])
        wide = combine_partially_synthetic([1.0, 2.0, 3.0], [1, 1, 1])
        assert wide.upper - wide.lower > narrow.upper - narrow.lower


class TestAnalystRegression:
    def test_exact_fit(self):
        X = np.column_stack([np.ones(6), np.arange(6.0)])
        c = np.array([1.5, -0.25])
        syn = SyntheticCollection(np.tile(X @ c, (3, 1)), tuple(range(6)))
        fits = fit_analyst_regression(syn, X)
        np.testing.assert_allclose(fits.estimates, np.tile(c, (3, 1)), atol=1e-12)
        np.testing.assert_allclose(fits.variances, 0.0, atol=1e-24)

    def test_normal_equations(self):
        rng = np.random.default_rng(0)
        X = np.column_stack([np.ones(5), rng.normal(size=(5, 2))])
        y = rng.normal(size=5)
        coef, var = ols(X, y)
        ne = np.linalg.solve(X.T @ X, X.T @ y)
        np.testing.assert_allclose(coef, ne, atol=1e-12)
        r = y - X @ ne
        np.testing.assert_allclose(var, (r @ r / 2) * np.diag(np.linalg.inv(X.T @ X)), rtol=1e-10)

    def test_rank_deficient(self):
        X = np.column_stack([np.ones(4), np.ones(4)])
        with pytest.raises(ValidationError):
            fit_analyst_regression(SyntheticCollection(np.zeros((2, 4)), (0, 1, 2, 3)), X)

    def test_utility_and_real_intervals(self):
        rng = np.random.default_rng(2)
        n = 60
        X = np.column_stack([np.ones(n), rng.normal(size=n)])
        y = X @ [1.0, 2.0] + rng.normal(scale=0.1, size=n)
        ds = GeoDataset(rng.random((n, 2)), y, X)
        syn = SyntheticCollection(y + rng.normal(scale=0.1, size=(20, n)), ds.record_ids)
        reports = utility_report(syn, X, ("b0", "b1"))
        real = real_data_intervals(ds, X, ("b0", "b1"))
        for rep, ref in zip(reports, real):
            assert rep.lower <= ref["estimate"] <= rep.upper
            assert rep.name == ref["name"]

    def test_bit_identical_reports(self):
        rng = np.random.default_rng(3)
        X = np.column_stack([np.ones(10), rng.normal(size=10)])
        syn = SyntheticCollection(rng.normal(size=(5, 10)), tuple(range(10)))
        a = [r.to_dict() for r in utility_report(syn, X)]
        b = [r.to_dict() for r in utility_report(syn, X)]
        assert a == b
