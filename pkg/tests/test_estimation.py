"""Estimation and pooling arithmetic, invariance properties, and limits."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trialmi.errors import EstimationError
from trialmi.estimation import (coverage_indicator, estimate_complete,
                                estimate_matrix, pool_rubin)
from trialmi.imputation import CompletedDataset

from .helpers import completer, make_dataset


def completed(values0, values1):
    subjects = ([completer(v, arm=0) for v in values0]
                + [completer(v, arm=1) for v in values1])
    data = make_dataset(subjects)
    return CompletedDataset(dataset=data,
                            endpoints=np.array(list(values0) + list(values1), dtype=float),
                            provenance=tuple("observed" for _ in subjects))


class TestCompleteEstimate:
    def test_hand_arithmetic(self):
        est = estimate_complete(completed([1.0, 2.0, 3.0], [2.0, 2.0, 2.0]))
        assert est.mean_control == pytest.approx(2.0, abs=1e-15)
        assert est.var_control == pytest.approx(1.0 / 3.0, abs=1e-15)

    def test_identical_constants(self):
        est = estimate_complete(completed([4.0] * 5, [4.0] * 5))
        assert est.difference == 0.0
        assert est.var_difference == 0.0

    def test_empty_arm_is_error(self):
        subjects = [completer(1.0, arm=0), completer(2.0, arm=0)]
        c = CompletedDataset(dataset=make_dataset(subjects),
                             endpoints=np.array([1.0, 2.0]),
                             provenance=("observed", "observed"))
        with pytest.raises(EstimationError):
            estimate_complete(c)

    def test_matches_streaming_oracle(self):
        g = np.random.default_rng(8)
        v0 = list(g.normal(0, 2, 37))
        v1 = list(g.normal(-1, 1, 43))
        est = estimate_complete(completed(v0, v1))

        def streaming(vals):
            mean = 0.0
            m2 = 0.0
            for i, v in enumerate(vals, start=1):
                delta = v - mean
                mean += delta / i
                m2 += delta * (v - mean)
            return mean, m2 / (len(vals) - 1) / len(vals)

        m0, var0 = streaming(v0)
        m1, var1 = streaming(v1)
        assert est.mean_control == pytest.approx(m0, rel=1e-12)
        assert est.var_control == pytest.approx(var0, rel=1e-12)
        assert est.difference == pytest.approx(m1 - m0, rel=1e-12)

    def test_matrix_equals_scalar_path(self):
        g = np.random.default_rng(4)
        arms = np.array([0] * 10 + [1] * 12)
        endpoints = g.normal(size=(5, 22))
        out = estimate_matrix(arms, endpoints)
        for m in range(5):
            c = completed(endpoints[m, :10], endpoints[m, 10:])
            est = estimate_complete(c)
            assert out["mean_control"][m] == pytest.approx(est.mean_control, rel=1e-14)
            assert out["var_difference"][m] == pytest.approx(est.var_difference, rel=1e-14)


class TestRubinPooling:
    def test_hand_arithmetic(self):
        pooled = pool_rubin([(1.0, 0.5), (2.0, 0.5)])
        assert pooled.point == 1.5
        assert pooled.within == 0.5
        assert pooled.between == 0.5
        assert pooled.total == pytest.approx(1.25, abs=1e-15)

    def test_identical_points_reduce_to_within(self):
        pooled = pool_rubin([(1.0, 0.4)] * 6)
        assert pooled.between == 0.0
        assert pooled.total == pytest.approx(0.4, abs=1e-15)

    def test_degenerate_between_gives_normal_theory_ci(self):
        pooled = pool_rubin([(2.0, 0.25)] * 10, level=0.95)
        half = 1.959963984540054 * math.sqrt(0.25)
        assert pooled.ci_low == pytest.approx(2.0 - half, abs=1e-9)
        assert pooled.ci_high == pytest.approx(2.0 + half, abs=1e-9)

    def test_needs_two(self):
        with pytest.raises(EstimationError):
            pool_rubin([(1.0, 0.5)])

    def test_barnard_rubin_df_bounded_by_complete_data_df(self):
        pooled = pool_rubin([(0.1, 0.2), (0.4, 0.25), (-0.2, 0.22)], com_df=30)
        assert 0 < pooled.df < 30

    @given(st.lists(st.tuples(st.floats(-5, 5), st.floats(0.01, 2.0)), min_size=2, max_size=12),
           st.randoms(use_true_random=False))
    def test_permutation_invariant(self, estimates, rnd):
        a = pool_rubin(estimates)
        shuffled = list(estimates)
        rnd.shuffle(shuffled)
        b = pool_rubin(shuffled)
        assert a.point == pytest.approx(b.point, rel=1e-12, abs=1e-12)
        assert a.total == pytest.approx(b.total, rel=1e-9, abs=1e-12)

    @given(st.floats(0.0, 3.0), st.floats(0.1, 3.0))
    def test_total_nondecreasing_in_between(self, spread, w):
        lo = pool_rubin([(1.0 - spread, w), (1.0 + spread, w)])
        hi = pool_rubin([(1.0 - spread - 0.5, w), (1.0 + spread + 0.5, w)])
        assert hi.total >= lo.total - 1e-12


class TestCoverage:
    def test_truth_inside(self):
        pooled = pool_rubin([(0.0, 0.25), (0.2, 0.25)])
        assert coverage_indicator(pooled, 0.1)

    def test_closed_interval_endpoints(self):
        pooled = pool_rubin([(1.0, 0.5), (2.0, 0.5)])
        assert coverage_indicator(pooled, pooled.ci_low)
        assert coverage_indicator(pooled, pooled.ci_high)

    def test_outside(self):
        pooled = pool_rubin([(1.0, 0.5), (2.0, 0.5)])
        assert not coverage_indicator(pooled, pooled.ci_high + 1e-3)
