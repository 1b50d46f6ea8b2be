import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffsmooth.errors import DomainError, InsufficientDataError
from diffsmooth.geodata import pairwise_distances
from diffsmooth.risk import (OutlierVerdict, alpha_for_gamma, build_profile, continuous_weights,
                             detect_outliers_binary, gamma_for_alpha, identity_profile, write_verdict_csv)
from diffsmooth.simharness import SimConfig, generate_simulated


class TestBinaryDetection:
    def test_simulated_planted_outlier_flagged(self):
        ds = generate_simulated(SimConfig(seed=0))
        v = detect_outliers_binary(pairwise_distances(ds), 12.7)
        assert v.threshold_M == pytest.approx(-math.log(0.2) / 12.7)
        assert v.at_risk[-1]
        assert 1 <= v.count - 1 <= 5

    def test_coincident_pair(self):
        v = detect_outliers_binary(np.zeros((2, 2)), 5.0)
        assert v.count == 0 and np.all(v.nn_distance == 0)

    def test_boundary_is_flagged(self):
        M = -math.log(0.2) / 2.0
        d = np.array([[0.0, M], [M, 0.0]])
        assert detect_outliers_binary(d, 2.0).count == 2

    def test_too_few(self):
        with pytest.raises(InsufficientDataError):
            detect_outliers_binary(np.zeros((1, 1)), 1.0)

    def test_invariant_to_rigid_motion_and_permutation(self):
        rng = np.random.default_rng(5)
        locs = np.vstack([rng.random((40, 2)) * 0.3, [[0.9, 0.9], [0.1, 0.95]]])
        base = detect_outliers_binary(pairwise_distances(locs), 12.7).at_risk
        theta = 0.7
        R = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
        moved = locs @ R.T + np.array([5.0, -3.0])
        np.testing.assert_array_equal(detect_outliers_binary(pairwise_distances(moved), 12.7).at_risk, base)
        perm = rng.permutation(len(locs))
        np.testing.assert_array_equal(
            detect_outliers_binary(pairwise_distances(locs[perm]), 12.7).at_risk, base[perm])

    def test_verdict_csv(self, tmp_path):
        v = detect_outliers_binary(np.array([[0, 1.0], [1.0, 0]]), 0.5)
        path = write_verdict_csv(tmp_path / "v.csv", ("a", "b"), v)
        lines = path.read_text().splitlines()
        assert lines[0] == "record_id,nn_distance,a_i,at_risk"
        assert lines[1].startswith("a,1.0,")


class TestContinuousWeights:
    def test_coincident(self):
        np.testing.assert_array_equal(continuous_weights(np.zeros((2, 2)), 3.0), [0.0, 0.0])

    def test_plug_in(self):
        M = -math.log(0.2) / 12.7
        d = np.array([[0, M], [M, 0]])
        np.testing.assert_allclose(continuous_weights(d, 12.7), [0.8, 0.8], rtol=1e-14)

    def test_planted_outlier(self):
        ds = generate_simulated(SimConfig(seed=0))
        a = continuous_weights(pairwise_distances(ds), 12.7)
        assert a[-1] > 1 - math.exp(-12.7 * 0.26)
        assert 1 - math.exp(-3.302) == pytest.approx(0.963, abs=5e-4)


class TestShrinkage:
    def test_gamma_zero_anchor(self):
        s2, t2 = 4.0, 0.0625
        assert gamma_for_alpha(s2 / (s2 + t2), s2, t2) == 0.0
        assert alpha_for_gamma(0.0, s2, t2) == s2 / (s2 + t2)
        assert alpha_for_gamma(0.0, 4.0, 0.0625) == pytest.approx(4 / 4.0625)
        assert 4 / 4.0625 == pytest.approx(0.9846, abs=1e-4)

    def test_half_anchor(self):
        s2, t2 = 4.0, 0.0625
        assert gamma_for_alpha(0.5, s2, t2) == s2 / t2 - 1
        assert alpha_for_gamma(s2 / t2 - 1, s2, t2) == 0.5

    def test_infinite_anchor(self):
        assert gamma_for_alpha(0.0, 4.0, 0.0625) == math.inf
        assert alpha_for_gamma(math.inf, 4.0, 0.0625) == 0.0

    def test_domain(self):
        with pytest.raises(DomainError):
            gamma_for_alpha(0.99, 1.0, 1.0)
        with pytest.raises(DomainError):
            gamma_for_alpha(-0.1, 1.0, 1.0)

    @settings(max_examples=200)
    @given(st.floats(0.01, 10), st.floats(0.01, 10), st.floats(0, 1))
    def test_round_trip(self, s2, t2, frac):
        alpha = frac * s2 / (s2 + t2)
        back = alpha_for_gamma(gamma_for_alpha(alpha, s2, t2), s2, t2)
        assert back == pytest.approx(alpha, abs=1e-12)


class TestProfile:
    def test_zero_weight(self):
        p = build_profile([0.0, 0.0], 7.0)
        np.testing.assert_array_equal(p.A_diag, [1.0, 1.0])

    def test_infinite_gamma(self):
        p = build_profile([1.0, 0.0, 0.3], math.inf)
        np.testing.assert_array_equal(p.A_diag, [0.0, 1.0, 0.0])

    def test_finite(self):
        assert build_profile([1.0], 3.0).A_diag[0] == 0.5

    def test_gamma_zero_identity(self):
        p = build_profile(np.linspace(0, 1, 7), 0.0)
        assert p.is_identity

    def test_from_verdict(self):
        v = OutlierVerdict(np.array([True, False]), np.array([1.0, 0.1]), 0.5)
        np.testing.assert_array_equal(build_profile(v).A_diag, [0.0, 1.0])

    def test_rejects_bad_weights(self):
        with pytest.raises(DomainError):
            build_profile([1.5], 1.0)
        with pytest.raises(DomainError):
            build_profile([0.5], -1.0)

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=10), st.floats(0, 1e6), st.floats(0, 1e6))
    def test_monotone_in_gamma(self, a, g1, g2):
        lo, hi = sorted((g1, g2))
        A_lo = build_profile(a, lo).A_diag
        A_hi = build_profile(a, hi).A_diag
        assert np.all(A_hi <= A_lo)
        assert np.all(build_profile(a, math.inf).A_diag <= A_hi)
        assert np.all((A_lo >= 0) & (A_lo <= 1))

    @given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 100))
    def test_monotone_in_weight(self, a1, a2, gamma):
        lo, hi = sorted((a1, a2))
        A = build_profile([lo, hi], gamma).A_diag
        assert A[1] <= A[0]

    def test_identity_profile(self):
        assert identity_profile(4).is_identity
