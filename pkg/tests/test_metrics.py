import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepconf.errors import ConfigError, DomainError
from deepconf.metrics import (
    Measure,
    MetricConfig,
    bottom_count,
    group_confidences,
    measure_value,
    token_confidence,
    token_confidences,
    token_entropy,
    trace_confidence,
    window_means,
)
from deepconf.trace import TokenRecord, Trace

from conftest import make_trace, random_rows


def brute_groups(conf, n):
    """O(N*n) reference: mean of each full window, or the whole mean if short."""
    conf = list(conf)
    if len(conf) < n:
        return [math.fsum(conf) / len(conf)]
    return [math.fsum(conf[i - n + 1 : i + 1]) / n for i in range(n - 1, len(conf))]


# --- entropy ---------------------------------------------------------------


def test_entropy_uniform_four():
    assert token_entropy(TokenRecord((-math.log(4),) * 4)) == pytest.approx(math.log(4), abs=1e-12)


def test_entropy_point_mass():
    assert token_entropy(TokenRecord((0.0,))) == 0.0


def test_entropy_two_halves():
    # direct evaluation: -2 * 0.5 * ln 0.5
    expected = -(0.5 * math.log(0.5) + 0.5 * math.log(0.5))
    assert token_entropy(TokenRecord((math.log(0.5), math.log(0.5)))) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.6931, abs=1e-4)


def test_entropy_renormalizes_truncated_candidates():
    # top-2 of a larger distribution: probabilities 0.3, 0.1 -> 0.75, 0.25
    h = token_entropy(TokenRecord((math.log(0.3), math.log(0.1))))
    assert h == pytest.approx(-(0.75 * math.log(0.75) + 0.25 * math.log(0.25)), abs=1e-12)


# --- token confidence --------------------------------------------------------


def test_token_confidence_single():
    assert token_confidence(TokenRecord((-0.5,)), 1) == 0.5


def test_token_confidence_top3():
    assert token_confidence(TokenRecord((-0.1, -2.3, -4.0)), 3) == pytest.approx((0.1 + 2.3 + 4.0) / 3)
    assert token_confidence(TokenRecord((-0.1, -2.3, -4.0)), 3) == pytest.approx(2.1333333333, abs=1e-9)


def test_token_confidence_uniform_ten():
    rec = TokenRecord((-math.log(10),) * 10)
    assert token_confidence(rec, 5) == pytest.approx(math.log(10))


def test_token_confidence_k_too_large():
    with pytest.raises(ConfigError):
        token_confidence(TokenRecord((-0.1, -0.2)), 3)


def test_exclusive_variant_drops_sampled_token():
    rec = TokenRecord((-0.1, -2.0, -4.0))
    assert token_confidence(rec, 3, exclude_sampled=True) == pytest.approx(3.0)
    assert token_confidence(TokenRecord((-0.3,)), exclude_sampled=True) == 0.0


def test_vectorized_confidences_match_scalar(rng):
    rows = random_rows(rng, 50, 5)
    t = Trace("x", rows)
    for k in (1, 3, 5, None):
        for excl in (False, True):
            if excl and k == 1:
                continue
            vec = token_confidences(t, k, excl)
            ref = [token_confidence(r, k, exclude_sampled=excl) for r in t.tokens]
            np.testing.assert_allclose(vec, ref, rtol=0, atol=1e-12)


def test_ragged_confidences_use_each_rows_width():
    t = Trace("x", [[-1.0], [-1.0, -3.0], [-0.5, -1.0, -1.5]])
    np.testing.assert_allclose(token_confidences(t), [1.0, 2.0, 1.0])
    np.testing.assert_allclose(token_confidences(t, exclude_sampled=True), [0.0, 3.0, 1.25])


# --- groups ------------------------------------------------------------------


def test_groups_small_example():
    t = make_trace("x", [1.0, 3.0, 5.0])
    np.testing.assert_allclose(group_confidences(t, MetricConfig(window_size=2)), [2.0, 4.0])
    assert brute_groups([1.0, 3.0, 5.0], 2) == [2.0, 4.0]


def test_short_trace_single_group():
    t = make_trace("x", [1.0, 3.0, 5.0])
    np.testing.assert_allclose(group_confidences(t, MetricConfig(window_size=4)), [3.0])


@pytest.mark.parametrize("n", [1, 2, 7, 50])
def test_constant_confidence_groups(n):
    t = make_trace("x", [2.5] * 40)
    assert np.all(group_confidences(t, MetricConfig(window_size=n)) == 2.5)


def test_empty_trace_is_domain_error():
    with pytest.raises(DomainError):
        group_confidences(Trace("e", []), MetricConfig())
    with pytest.raises(DomainError):
        trace_confidence(Trace("e", []), MetricConfig())


def test_window_means_long_series_drift():
    # spans several restart blocks
    rng = np.random.default_rng(5)
    vals = rng.uniform(0, 20, size=(1 << 17) + 333)
    n = 2048
    got = window_means(vals, n)
    c = np.concatenate([[0.0], np.cumsum(vals.astype(np.longdouble))])
    ref = ((c[n:] - c[:-n]) / n).astype(np.float64)
    assert np.max(np.abs(got - ref)) <= 1e-9


# --- trace confidence ------------------------------------------------------


def test_mean_confidence():
    t = make_trace("x", [1, 2, 3])
    assert trace_confidence(t, MetricConfig(window_size=1)).mean == pytest.approx(2.0)


def test_bottom_and_lowest_over_ten_groups():
    # window 1 makes the groups the token confidences themselves
    t = make_trace("x", list(range(10, 0, -1)))
    tc = trace_confidence(t, MetricConfig(window_size=1, bottom_fraction=0.1))
    assert tc.bottom_q == 1.0
    assert tc.lowest_group == 1.0


def test_bottom_count_rounding():
    assert bottom_count(0.1, 10) == 1
    assert bottom_count(0.1, 9) == 1
    assert bottom_count(0.1, 30) == 3  # 0.1 * 30 is 3.0000000000000004 in binary
    assert bottom_count(0.1, 31) == 4
    assert bottom_count(1.0, 7) == 7


def test_tail_covers_whole_short_trace():
    t = make_trace("x", [1, 5, 9])
    tc = trace_confidence(t, MetricConfig(window_size=2, tail_tokens=2048))
    assert tc.tail == tc.mean


def test_tail_and_head_windows():
    conf = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10]
    t = make_trace("x", conf)
    cfg = MetricConfig(window_size=3, tail_tokens=3, head_fraction=0.2)
    tc = trace_confidence(t, cfg)
    assert tc.tail == pytest.approx(9.0)
    assert tc.head == pytest.approx(1.5)
    frac = trace_confidence(t, MetricConfig(window_size=3, tail_fraction=0.5))
    assert frac.tail == pytest.approx(8.0)


def test_measure_value_agrees_with_trace_confidence(rng):
    cfg = MetricConfig(window_size=16, tail_tokens=32, head_fraction=0.1)
    for i in range(30):
        t = Trace(f"t{i}", random_rows(rng, int(rng.integers(1, 120)), 4))
        tc = trace_confidence(t, cfg)
        for m in Measure:
            assert measure_value(t, cfg, m) == tc.get(m)


def test_head_measure_needs_fraction():
    with pytest.raises(ConfigError):
        measure_value(make_trace("x", [1.0]), MetricConfig(), "head")


@pytest.mark.parametrize(
    "kw",
    [
        {"window_size": 0},
        {"top_k": 0},
        {"bottom_fraction": 0.0},
        {"bottom_fraction": 1.5},
        {"tail_tokens": 0},
        {"head_fraction": 0},
        {"top_k": 1, "exclude_sampled": True},
    ],
)
def test_metric_config_ranges(kw):
    with pytest.raises(ConfigError):
        MetricConfig(**kw)


# --- properties ----------------------------------------------------------------

rows_strategy = st.integers(1, 6).flatmap(
    lambda k: st.lists(
        st.lists(st.floats(min_value=-30, max_value=0, allow_nan=False), min_size=k, max_size=k),
        min_size=1,
        max_size=80,
    )
)


@settings(max_examples=200, deadline=None)
@given(rows_strategy, st.integers(1, 40), st.floats(0.01, 1.0))
def test_group_invariants(rows, n, q):
    rows = [[r[0]] + sorted(r[1:], reverse=True) for r in rows]
    t = Trace("x", rows)
    cfg = MetricConfig(window_size=n, bottom_fraction=q)
    conf = token_confidences(t)
    groups = group_confidences(t, cfg)
    assert np.all(groups >= conf.min()) and np.all(groups <= conf.max())
    np.testing.assert_allclose(groups, brute_groups(conf, n), rtol=0, atol=1e-9)
    tc = trace_confidence(t, cfg)
    assert tc.lowest_group == groups.min()
    assert tc.lowest_group <= tc.bottom_q <= groups.max()
    for v in (tc.mean, tc.bottom_q, tc.lowest_group, tc.tail):
        assert conf.min() <= v <= conf.max()


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(min_value=-30, max_value=0, allow_nan=False), min_size=1, max_size=20))
def test_entropy_bounds(lps):
    rec = TokenRecord(tuple([lps[0]] + sorted(lps[1:], reverse=True)))
    h = token_entropy(rec)
    assert 0.0 <= h <= math.log(rec.candidate_count)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(min_value=-30, max_value=0, allow_nan=False), min_size=1, max_size=10),
    st.data(),
)
def test_confidence_monotone_in_logprobs(lps, data):
    lps = [lps[0]] + sorted(lps[1:], reverse=True)
    k = data.draw(st.integers(1, len(lps)))
    j = data.draw(st.integers(0, len(lps) - 1))
    drop = data.draw(st.floats(0, 10))
    lower = list(lps)
    lower[j] -= drop
    lower = [lower[0]] + sorted(lower[1:], reverse=True)
    before = token_confidence(TokenRecord(tuple(lps)), k)
    after = token_confidence(TokenRecord(tuple(lower)), k)
    assert before >= 0
    assert after >= before - 1e-12


def test_bottom_fraction_one_is_mean_of_groups(rng):
    t = Trace("x", random_rows(rng, 60, 3))
    cfg = MetricConfig(window_size=5, bottom_fraction=1.0)
    groups = group_confidences(t, cfg)
    assert trace_confidence(t, cfg).bottom_q == pytest.approx(groups.mean(), abs=1e-12)
