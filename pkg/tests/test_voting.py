import math
import random
from collections import defaultdict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepconf.errors import ConfigError, EmptyVoteError, ValidationError
from deepconf.metrics import Measure, MetricConfig, measure_value
from deepconf.voting import (
    Ballot,
    filter_top_eta,
    keep_count,
    majority_vote,
    offline_deepconf,
    weighted_vote,
)

from conftest import make_trace, random_pool


def B(answer, weight=1.0, tid="", conf=None):
    return Ballot(answer, weight, tid, weight if conf is None else conf)


def test_majority_basic():
    r = majority_vote([B("A", tid="1"), B("A", tid="2"), B("B", tid="3")])
    assert r.winner == "A"
    assert r.consensus_ratio == pytest.approx(2 / 3)


def test_majority_tie_goes_to_smallest_answer():
    assert majority_vote([B("B"), B("A")]).winner == "A"


def test_majority_random_matches_counting():
    rng = random.Random(4)
    ballots = [B(rng.choice("ABCDE"), tid=str(i)) for i in range(100)]
    counts = defaultdict(int)
    for b in ballots:
        counts[b.answer] += 1
    top = max(counts.values())
    expected = sorted(a for a, c in counts.items() if c == top)[0]
    assert majority_vote(ballots).winner == expected


def test_weighted_example():
    r = weighted_vote([B("A", 0.9), B("B", 0.5), B("B", 0.5)])
    assert r.winner == "B"
    assert r.tally == {"A": 0.9, "B": 1.0}


def test_equal_weights_same_as_majority():
    ballots = [B("A", 0.3), B("B", 0.3), B("B", 0.3), B("C", 0.3)]
    assert weighted_vote(ballots).winner == majority_vote(ballots).winner


def test_single_ballot_full_consensus():
    r = weighted_vote([B("X", 2.0)])
    assert r.winner == "X" and r.consensus_ratio == 1.0


def test_negative_weight_rejected():
    with pytest.raises(ValidationError, match="negative weight"):
        weighted_vote([B("A", -0.1, "t")])


def test_no_answers_is_empty_vote():
    with pytest.raises(EmptyVoteError):
        majority_vote([Ballot(None)])
    with pytest.raises(EmptyVoteError):
        weighted_vote([])


def test_answerless_ballots_are_ignored():
    r = majority_vote([Ballot(None, 1, "x"), B("A", tid="y")])
    assert r.kept_trace_ids == frozenset({"y"})
    assert r.consensus_ratio == 1.0


def test_all_zero_weights_fall_back_to_counts():
    r = weighted_vote([B("A", 0.0), B("B", 0.0), B("B", 0.0)])
    assert r.winner == "B" and r.consensus_ratio == pytest.approx(2 / 3)


def test_keep_count_anchor():
    assert keep_count(10, 512) == 51
    assert keep_count(90, 512) == 461
    assert keep_count(10, 16) == 2
    assert keep_count(90, 16) == 14
    assert keep_count(10, 5) == 1  # round-half-up of 0.5
    assert keep_count(10, 4) == 1  # floor of one


@pytest.mark.parametrize("eta", [0, -1, 100.5, float("nan")])
def test_eta_out_of_range(eta):
    with pytest.raises(ConfigError):
        filter_top_eta([B("A")], eta)


def test_filter_top_eta_examples():
    ballots = [B("x", conf=float(c), tid=f"t{c:02d}") for c in range(1, 11)]
    kept = filter_top_eta(ballots, 10)
    assert [b.confidence for b in kept] == [10.0]
    assert filter_top_eta(ballots, 100) == ballots
    big = [B("x", conf=float(i), tid=f"t{i:04d}") for i in range(512)]
    assert len(filter_top_eta(big, 10)) == 51


def test_filter_keeps_original_order_and_breaks_ties_by_id():
    ballots = [B("a", conf=1.0, tid="z"), B("b", conf=5.0, tid="m"), B("c", conf=1.0, tid="a")]
    kept = filter_top_eta(ballots, 67)  # keeps 2
    assert [b.trace_id for b in kept] == ["m", "a"]


def brute_offline(traces, cfg, measure, eta):
    """Reference pipeline: score, sort, slice, weigh, argmax."""
    scored = [(measure_value(t, cfg, measure), t.trace_id, t.answer) for t in traces if t.answer is not None]
    scored.sort(key=lambda x: (-x[0], x[1]))
    m = max(1, math.floor(eta / 100 * len(scored) + 0.5 + 1e-12))
    top = scored[:m]
    weights = defaultdict(list)
    for c, _, a in top:
        weights[a].append(c)
    tally = {a: math.fsum(w) for a, w in weights.items()}
    best = max(tally.values())
    return sorted(a for a, v in tally.items() if v == best)[0], {tid for _, tid, _ in top}


def test_offline_full_eta_unit_weights_is_majority():
    rng = np.random.default_rng(8)
    pool = random_pool(rng, size=40, k=3)
    cfg = MetricConfig(window_size=8)
    ballots = [B(t.answer, tid=t.trace_id) for t in pool.traces]
    got = offline_deepconf(pool.traces, cfg, Measure.MEAN, 100, unit_weights=True)
    assert got.winner == majority_vote(ballots).winner


def test_offline_two_traces_high_confidence_wins():
    hi = make_trace("hi", [5.0] * 4, answer="A")
    lo = make_trace("lo", [1.0] * 4, answer="B")
    assert offline_deepconf([lo, hi], MetricConfig(window_size=2), "lowest_group", 10).winner == "A"


def test_offline_matches_brute_force():
    rng = np.random.default_rng(9)
    cfg = MetricConfig(window_size=6, tail_tokens=10)
    for _ in range(60):
        pool = random_pool(rng, size=64, k=3)
        for measure in ("mean", "bottom_q", "lowest_group", "tail"):
            for eta in (10, 50, 90):
                res = offline_deepconf(pool.traces, cfg, measure, eta)
                winner, kept = brute_offline(pool.traces, cfg, measure, eta)
                assert res.winner == winner
                assert set(res.kept_trace_ids) == kept


ballot_lists = st.lists(
    st.tuples(st.sampled_from("ABCD"), st.floats(0.0, 10.0, allow_nan=False)),
    min_size=1,
    max_size=40,
)


def _mk(items):
    return [Ballot(a, w, f"t{i:03d}", w) for i, (a, w) in enumerate(items)]


@settings(max_examples=200, deadline=None)
@given(ballot_lists, st.floats(0.01, 100.0), st.randoms(use_true_random=False))
def test_scale_and_permutation_invariance(items, c, rnd):
    ballots = _mk(items)
    base = weighted_vote(ballots)
    scaled = weighted_vote([Ballot(b.answer, b.weight * c, b.trace_id, b.confidence) for b in ballots])
    shuffled = list(ballots)
    rnd.shuffle(shuffled)
    perm = weighted_vote(shuffled)
    assert perm.winner == base.winner and perm.tally == base.tally
    if sum(b.weight for b in ballots) > 0 and all(b.weight * c > 0 or b.weight == 0 for b in ballots):
        assert scaled.consensus_ratio == pytest.approx(base.consensus_ratio, rel=1e-9)
        # argmax invariance up to ties created by rounding of the scaled sums
        top = max(base.tally.values())
        near = [a for a, v in base.tally.items() if abs(v - top) <= 1e-9 * max(1.0, top)]
        if len(near) == 1:
            assert scaled.winner == base.winner


@settings(max_examples=200, deadline=None)
@given(ballot_lists)
def test_unit_weights_equal_majority(items):
    ballots = [Ballot(a, 1.0, f"t{i}", w) for i, (a, w) in enumerate(items)]
    w, m = weighted_vote(ballots), majority_vote(ballots)
    assert (w.winner, w.tally, w.consensus_ratio) == (m.winner, m.tally, m.consensus_ratio)


@settings(max_examples=200, deadline=None)
@given(ballot_lists)
def test_consensus_ratio_range(items):
    r = weighted_vote(_mk(items))
    assert 0 < r.consensus_ratio <= 1
    weighted = {a for a, w in items if w > 0}
    if weighted and all(w == 0 or w > 1e-6 for _, w in items):
        assert (r.consensus_ratio == 1.0) == (len(weighted) == 1)


@settings(max_examples=200, deadline=None)
@given(ballot_lists, st.floats(1, 100), st.floats(1, 100))
def test_filter_monotone_in_eta(items, e1, e2):
    lo, hi = sorted((e1, e2))
    ballots = _mk(items)
    small = {b.trace_id for b in filter_top_eta(ballots, lo)}
    large = {b.trace_id for b in filter_top_eta(ballots, hi)}
    assert small <= large
