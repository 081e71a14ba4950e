import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from tsuda.metrics import (accuracy, average_ranks, cd_diagram_data, cd_diagram_json,
                           friedman_test, imbalance_from_proportions, imbalance_score,
                           macro_f1, rank_columns, shift_proxy, wilcoxon_signed_rank)


def test_accuracy_and_length_checks():
    assert accuracy([0, 1, 2, 2], [0, 1, 1, 2]) == 0.75
    with pytest.raises(ValueError):
        accuracy([0, 1], [0])
    with pytest.raises(ValueError):
        accuracy([], [])


def test_macro_f1_hand_computed():
    # class 0: tp=1 fp=0 fn=1 -> 2/3; class 1: tp=1 fp=1 fn=0 -> 2/3; class 2 absent -> 0
    assert macro_f1([0, 1, 1], [0, 0, 1], 3) == pytest.approx((2 / 3 + 2 / 3 + 0) / 3)


def test_imbalance_uniform_and_skewed():
    score, flag = imbalance_score(np.repeat(np.arange(4), 25), 4)
    assert abs(score - 1.0) < 1e-9 and not flag
    score, flag = imbalance_score(np.array([0] * 90 + [1] * 10), 2)
    direct = -(0.9 * math.log(0.9) + 0.1 * math.log(0.1)) / math.log(2)
    assert abs(score - direct) < 1e-12 and abs(score - 0.4690) < 1e-3 and flag


def test_imbalance_from_proportions_matches_scipy():
    p = [0.5, 0.3, 0.2]
    assert imbalance_from_proportions(p) == pytest.approx(stats.entropy(p) / math.log(3), abs=1e-12)


def test_imbalance_single_class_domain_is_zero():
    assert imbalance_score(np.zeros(10, dtype=int), 3)[0] == 0.0


def test_shift_proxy():
    assert shift_proxy(0.9, 0.45) == 0.5
    assert shift_proxy(0.8, 0.9) < 0
    with pytest.raises(ValueError):
        shift_proxy(0.0, 0.3)


def test_friedman_perfect_ordering():
    scores = np.array([[0.9, 0.8, 0.95, 0.7], [0.6, 0.5, 0.7, 0.4], [0.3, 0.2, 0.1, 0.0]])
    stat, p, ranks = friedman_test(scores)
    assert abs(stat - 8.0) < 1e-9
    assert abs(p - math.exp(-4)) < 1e-12 and abs(p - 0.0183) < 1e-3
    assert ranks.tolist() == [1.0, 2.0, 3.0]


def test_friedman_matches_scipy_without_ties(rng):
    scores = rng.random((5, 9))
    stat, p, _ = friedman_test(scores)
    ref = stats.friedmanchisquare(*scores)
    assert stat == pytest.approx(ref.statistic, abs=1e-9)
    assert p == pytest.approx(ref.pvalue, abs=1e-12)


def test_friedman_requires_enough_methods():
    with pytest.raises(ValueError):
        friedman_test(np.ones((2, 4)))
    with pytest.raises(ValueError):
        friedman_test(np.ones((3, 1)))


def test_rank_ties_share_mean_position():
    ranks = rank_columns(np.array([[0.5], [0.9], [0.5]]))
    assert ranks[:, 0].tolist() == [2.5, 1.0, 2.5]


def _brute_ranks(col):
    out = np.empty(len(col))
    for i, v in enumerate(col):
        better = np.sum(col > v)
        equal = np.sum(col == v)
        out[i] = better + (equal + 1) / 2
    return out


def test_tie_averaged_ranks_match_brute_force():
    rng = np.random.default_rng(7)
    for _ in range(100):
        m = rng.integers(0, 4, size=(rng.integers(2, 6), rng.integers(1, 6))) / 4
        expected = np.column_stack([_brute_ranks(m[:, j]) for j in range(m.shape[1])])
        assert np.array_equal(rank_columns(m), expected)


def test_average_ranks_reject_missing_entries():
    with pytest.raises(ValueError):
        average_ranks(np.array([[0.1, np.nan], [0.2, 0.3]]))


def test_wilcoxon_constant_shift_n6():
    a = np.arange(6) / 10 + 0.05
    p, w, t, l = wilcoxon_signed_rank(a, a - 0.05)
    assert p == 0.03125 and (w, t, l) == (6, 0, 0)


def test_wilcoxon_exact_matches_scipy(rng):
    a, b = rng.random(12), rng.random(12)
    p, *_ = wilcoxon_signed_rank(a, b)
    assert p == pytest.approx(stats.wilcoxon(a, b, method="exact").pvalue, abs=1e-12)


def test_wilcoxon_exact_enumeration_with_ties():
    d = np.array([1.0, 1.0, 2.0, -3.0, 4.0, -4.0])
    p, *_ = wilcoxon_signed_rank(d, np.zeros(6), method="exact")
    ranks = stats.rankdata(np.abs(d))
    observed = ranks[d > 0].sum()
    sums = [sum(r for r, s in zip(ranks, signs) if s) for signs in itertools.product([0, 1], repeat=6)]
    sums = np.array(sums)
    expected = min(1.0, 2 * min(np.mean(sums <= observed), np.mean(sums >= observed)))
    assert p == pytest.approx(expected, abs=1e-12)


def test_wilcoxon_normal_matches_scipy(rng):
    a, b = rng.random(40), rng.random(40)
    p, *_ = wilcoxon_signed_rank(a, b)
    ref = stats.wilcoxon(a, b, method="approx", correction=False).pvalue
    assert p == pytest.approx(ref, abs=1e-9)


def test_wilcoxon_degenerate_cases():
    assert wilcoxon_signed_rank([0.5] * 6, [0.5] * 6) == (1.0, 0, 6, 0)
    with pytest.raises(ValueError):
        wilcoxon_signed_rank([0.1, 0.2, 0.3], [0.0, 0.0, 0.0])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1, 1, allow_nan=False), min_size=5, max_size=20))
def test_wilcoxon_pvalue_is_probability_and_swap_symmetric(diffs):
    d = np.array(diffs)
    if np.count_nonzero(d) < 5:
        return
    p1, w1, t1, l1 = wilcoxon_signed_rank(d, np.zeros_like(d))
    p2, w2, t2, l2 = wilcoxon_signed_rank(np.zeros_like(d), d)
    assert 0.0 <= p1 <= 1.0
    assert p1 == pytest.approx(p2, abs=1e-12)
    assert (w1, t1, l1) == (l2, t2, w2)


def test_cd_diagram_orders_by_rank():
    rec = cd_diagram_data([2.5, 1.0, 2.5], ["b", "a", "c"], (4.0, 0.1), "demo")
    assert [m["name"] for m in rec["methods"]] == ["a", "b", "c"]
    assert rec["axis"] == {"lowest_rank": 1, "highest_rank": 3}
    assert json.loads(cd_diagram_json(rec))["friedman"]["statistic"] == 4.0
