"""Survival math against brute-force oracles and hand-worked examples."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otsurv.bags import SurvivalRecord
from otsurv.errors import DataError, MetricUndefinedError
from otsurv.survival import (PROB_EPS, c_index, chi2_sf_1df, km_estimate,
                             logrank, median_split, nll_loss, risk_score,
                             survival_from_hazard)

from oracles import chi2_sf_1df_oracle, km_survival_oracle, pairwise_c_index


def rec(t, c, b=None):
    return SurvivalRecord(float(t), int(c), b)


# ---------------------------------------------------------------------------
# Survival curve


def test_survival_no_risk_limit():
    curve = survival_from_hazard(np.zeros(4))
    assert np.allclose(curve.survival, 1.0, atol=1e-5)


def test_survival_direct_product():
    curve = survival_from_hazard(np.array([0.5, 0.5]))
    assert np.allclose(curve.survival, [0.5, 0.25])


def test_survival_matches_cumprod_oracle():
    rng = np.random.default_rng(0)
    h = rng.uniform(0.05, 0.95, size=6)
    curve = survival_from_hazard(h)
    want = np.cumprod(1 - h)
    assert np.allclose(curve.survival, want, atol=1e-12)


def test_survival_rejects_out_of_range():
    with pytest.raises(DataError):
        survival_from_hazard(np.array([0.5, 1.5]))
    with pytest.raises(DataError):
        survival_from_hazard(np.array([-0.1]))


@given(st.lists(st.floats(min_value=1e-6, max_value=1 - 1e-6),
                min_size=1, max_size=12))
@settings(max_examples=80, deadline=None)
def test_survival_nonincreasing_in_unit_interval(hazards):
    curve = survival_from_hazard(np.array(hazards))
    assert np.all(np.diff(curve.survival) <= 1e-15)
    assert np.all(curve.survival > 0)
    assert np.all(curve.survival <= 1.0)


# ---------------------------------------------------------------------------
# NLL loss


def test_nll_perfect_prediction_near_zero():
    curve = survival_from_hazard(np.array([1.0 - 1e-9, 0.5]))
    loss = nll_loss(curve, rec(1.0, 0, b=0))
    assert loss == pytest.approx(0.0, abs=1e-5)


def test_nll_censored_direct_value():
    curve = survival_from_hazard(np.array([0.5, 0.5]))
    loss = nll_loss(curve, rec(1.0, 1, b=0), weight=1.0)
    assert loss == pytest.approx(math.log(2.0))


def test_nll_batch_matches_termwise_oracle():
    rng = np.random.default_rng(1)
    h = rng.uniform(0.1, 0.9, size=4)
    curve = survival_from_hazard(h)
    records = [rec(5, 0, 2), rec(3, 1, 1), rec(9, 0, 3), rec(1, 0, 0), rec(2, 1, 0)]
    weights = rng.uniform(0.2, 1.0, size=5)
    total = sum(nll_loss(curve, r, w) for r, w in zip(records, weights))
    S = np.cumprod(1 - np.clip(h, PROB_EPS, 1 - PROB_EPS))
    want = 0.0
    for r, w in zip(records, weights):
        t = r.bin
        if r.censor == 1:
            want += -w * math.log(max(S[t], PROB_EPS))
        else:
            s_prev = S[t - 1] if t >= 1 else 1.0
            want += -w * (math.log(max(s_prev, PROB_EPS))
                          + math.log(max(h[t], PROB_EPS)))
    assert total == pytest.approx(want, rel=1e-12)


def test_nll_gradient_sign_wrt_correct_bin_hazard():
    # raising the hazard of the observed event bin lowers the loss
    h = np.array([0.2, 0.3, 0.4, 0.5])
    record = rec(4.0, 0, b=2)
    base = nll_loss(survival_from_hazard(h), record)
    h2 = h.copy()
    h2[2] += 1e-6
    bumped = nll_loss(survival_from_hazard(h2), record)
    assert (bumped - base) / 1e-6 < 0


def test_nll_invalid_bin():
    curve = survival_from_hazard(np.array([0.5, 0.5]))
    with pytest.raises(DataError):
        nll_loss(curve, rec(1.0, 0, b=5))
    with pytest.raises(DataError):
        nll_loss(curve, rec(1.0, 0, b=None))


# ---------------------------------------------------------------------------
# Risk score


def test_risk_score_limits_and_monotonicity():
    low = survival_from_hazard(np.full(4, 1e-9))
    high = survival_from_hazard(np.full(4, 1 - 1e-9))
    assert risk_score(low) == pytest.approx(-4.0, abs=1e-5)
    assert risk_score(high) == pytest.approx(0.0, abs=1e-5)
    a = survival_from_hazard(np.array([0.2, 0.2, 0.2]))
    b = survival_from_hazard(np.array([0.3, 0.3, 0.3]))
    assert risk_score(a) < risk_score(b)


# ---------------------------------------------------------------------------
# C-index


def test_c_index_perfect_and_inverted():
    records = [rec(3, 0), rec(2, 0), rec(1, 0)]
    assert c_index([1, 2, 3], records) == 1.0
    assert c_index([3, 2, 1], records) == 0.0


def test_c_index_matches_exhaustive_oracle():
    rng = np.random.default_rng(2)
    for _ in range(200):
        n = int(rng.integers(4, 12))
        times = rng.uniform(1, 50, size=n)
        if rng.uniform() < 0.3:  # force some time ties
            times = np.round(times / 5) * 5
        censor = (rng.uniform(size=n) < 0.3).astype(int)
        if np.all(censor == 1):
            censor[0] = 0
        risks = rng.standard_normal(n)
        if rng.uniform() < 0.3:  # force some risk ties
            risks = np.round(risks)
        records = [rec(t, c) for t, c in zip(times, censor)]
        try:
            got = c_index(risks, records)
        except MetricUndefinedError:
            with pytest.raises(ZeroDivisionError):
                pairwise_c_index(risks, times, censor == 0)
            continue
        want = pairwise_c_index(risks, times, censor == 0)
        assert got == pytest.approx(want, abs=1e-14)


def test_c_index_antisymmetry_without_ties():
    rng = np.random.default_rng(3)
    times = rng.uniform(1, 30, size=10)
    censor = (rng.uniform(size=10) < 0.2).astype(int)
    risks = rng.standard_normal(10)
    records = [rec(t, c) for t, c in zip(times, censor)]
    assert c_index(risks, records) + c_index(-risks, records) == pytest.approx(1.0)


@given(st.integers(min_value=0, max_value=2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_c_index_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    times = rng.uniform(1, 30, size=8)
    censor = (rng.uniform(size=8) < 0.25).astype(int)
    risks = rng.standard_normal(8)
    records = [rec(t, c) for t, c in zip(times, censor)]
    try:
        base = c_index(risks, records)
    except MetricUndefinedError:
        return
    transformed = c_index(np.exp(2.0 * risks) + 5.0, records)
    assert transformed == pytest.approx(base, abs=1e-14)


def test_c_index_no_comparable_pairs():
    with pytest.raises(MetricUndefinedError):
        c_index([1.0, 2.0], [rec(5, 1), rec(5, 1)])


# ---------------------------------------------------------------------------
# Kaplan-Meier


def test_km_all_events_steps():
    curve = km_estimate([rec(1, 0), rec(2, 0), rec(3, 0)])
    assert np.allclose(curve.survival, [2 / 3, 1 / 3, 0.0])
    assert np.array_equal(curve.at_risk, [3, 2, 1])


def test_km_all_censored_flat():
    curve = km_estimate([rec(1, 1), rec(2, 1)])
    assert curve.event_times.size == 0


def test_km_tie_case_deaths_before_censorings():
    # times [1, 1, 2], censor at 1: at t=1 risk set is all 3, one death;
    # the censored case then leaves, so t=2 has risk set 1 and one death.
    curve = km_estimate([rec(1, 0), rec(1, 1), rec(2, 0)])
    assert np.array_equal(curve.event_times, [1.0, 2.0])
    assert np.array_equal(curve.at_risk, [3, 1])
    assert np.allclose(curve.survival, [2 / 3, 0.0])


def test_km_no_censoring_equals_empirical_survival():
    rng = np.random.default_rng(4)
    times = rng.integers(1, 8, size=30).astype(float)
    records = [rec(t, 0) for t in times]
    curve = km_estimate(records)
    for t, s in zip(curve.event_times, curve.survival):
        empirical = np.mean(times > t)
        assert s == pytest.approx(empirical, abs=1e-12)


def test_km_matches_hand_oracle_with_censoring():
    rng = np.random.default_rng(5)
    times = rng.integers(1, 10, size=25).astype(float)
    events = rng.uniform(size=25) < 0.7
    records = [rec(t, 0 if e else 1) for t, e in zip(times, events)]
    curve = km_estimate(records)
    want = km_survival_oracle(times, events)
    assert len(want) == curve.event_times.size
    for (t, s), tt, ss in zip(want, curve.event_times, curve.survival):
        assert t == tt
        assert s == pytest.approx(ss, abs=1e-12)


def test_km_at_risk_strictly_decreasing():
    rng = np.random.default_rng(6)
    times = rng.uniform(1, 20, size=40)
    events = rng.uniform(size=40) < 0.6
    records = [rec(t, 0 if e else 1) for t, e in zip(times, events)]
    curve = km_estimate(records)
    assert np.all(np.diff(curve.at_risk) < 0)
    assert np.all(np.diff(curve.survival) <= 0)


# ---------------------------------------------------------------------------
# Log-rank


def test_logrank_identical_groups_null():
    group = [rec(t, c) for t, c in [(1, 0), (2, 0), (3, 1), (4, 0)]]
    result = logrank(group, list(group))
    assert result.statistic == pytest.approx(0.0, abs=1e-12)
    assert result.p_value == pytest.approx(1.0)


def test_logrank_chi2_crossing_at_3841():
    assert chi2_sf_1df(3.841) == pytest.approx(0.05, abs=1e-3)


def test_chi2_tail_matches_series_oracle():
    for x in np.linspace(0.01, 30, 120):
        assert chi2_sf_1df(float(x)) == pytest.approx(
            chi2_sf_1df_oracle(float(x)), abs=1e-8)


def test_logrank_strong_separation():
    a = [rec(t, 0) for t in np.linspace(1, 10, 20)]
    b = [rec(t, 0) for t in np.linspace(50, 80, 20)]
    result = logrank(a, b)
    assert result.p_value < 0.001


def test_logrank_symmetry():
    rng = np.random.default_rng(7)
    a = [rec(t, int(c)) for t, c in zip(rng.uniform(1, 20, 15),
                                        rng.uniform(size=15) < 0.3)]
    b = [rec(t, int(c)) for t, c in zip(rng.uniform(5, 30, 12),
                                        rng.uniform(size=12) < 0.3)]
    r1 = logrank(a, b)
    r2 = logrank(b, a)
    assert r1.statistic == pytest.approx(r2.statistic, rel=1e-12)
    assert r1.p_value == pytest.approx(r2.p_value, rel=1e-12)


def test_logrank_no_events_degenerate():
    a = [rec(5, 1), rec(6, 1)]
    b = [rec(7, 1), rec(8, 1)]
    result = logrank(a, b)
    assert result.statistic == 0.0
    assert result.p_value == 1.0


# ---------------------------------------------------------------------------
# Median split


def test_median_split_even():
    low, high = median_split([1.0, 2.0, 3.0, 4.0])
    assert list(low) == [0, 1]
    assert list(high) == [2, 3]


def test_median_split_all_ties_falls_back():
    with pytest.warns(UserWarning, match="degenerate"):
        low, high = median_split([1.0, 1.0, 1.0])
    assert len(low) == 2 and len(high) == 1


def test_median_split_odd_sizes():
    rng = np.random.default_rng(8)
    low, high = median_split(rng.standard_normal(101))
    assert (len(low), len(high)) == (51, 50)


def test_median_split_ties_at_median_go_low():
    low, high = median_split([1.0, 2.0, 2.0, 3.0])
    assert list(low) == [0, 1, 2]
    assert list(high) == [3]
