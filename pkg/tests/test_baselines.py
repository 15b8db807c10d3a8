import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tierkv.baselines import BudgetPolicy, h2o_evict, random_evict, streaming_evict
from tierkv.scoring import ScoreVector


def test_streaming_keeps_all_when_short():
    assert streaming_evict(6, 8, 4).tolist() == list(range(6))


def test_streaming_sinks_and_window():
    # sinks 1..4 and window 17..20 counted from one
    assert streaming_evict(20, 8, 4).tolist() == [0, 1, 2, 3, 16, 17, 18, 19]


def test_streaming_latest_only():
    assert streaming_evict(9, 1, 0).tolist() == [8]


def test_streaming_budget_too_small():
    with pytest.raises(ValueError):
        streaming_evict(20, 4, 4)


def test_h2o_keeps_all_when_budget_covers():
    assert h2o_evict(ScoreVector(np.ones(5)), 5, 9, 2).tolist() == list(range(5))


def test_h2o_uniform_scores_is_recency():
    kept = h2o_evict(ScoreVector(np.ones(20)), 20, 8, 3)
    assert kept.tolist() == streaming_evict(20, 8, 0).tolist()


def test_h2o_sort_and_take(rng):
    s = rng.permutation(12).astype(float)
    kept = h2o_evict(ScoreVector(s), 12, 6, 2)
    rest = sorted(range(10), key=lambda i: -s[i])[:4]
    assert kept.tolist() == sorted(rest + [10, 11])


def test_h2o_budget_below_window():
    with pytest.raises(ValueError):
        h2o_evict(ScoreVector(np.ones(10)), 10, 3, 4)


def test_random_keep_all_and_determinism():
    assert random_evict(10, 10, 0).tolist() == list(range(10))
    assert random_evict(50, 10, 7).tolist() == random_evict(50, 10, 7).tolist()


def test_random_frequency():
    counts = np.zeros(10)
    for seed in range(1000):
        counts[random_evict(10, 5, seed)] += 1
    assert np.all(np.abs(counts / 1000 - 0.5) <= 0.05)


def test_random_protects_sinks_and_window():
    kept = random_evict(40, 12, 3, k_s=2, k_w=4)
    assert {0, 1, 36, 37, 38, 39} <= set(kept.tolist())


@given(st.integers(1, 80), st.integers(1, 80), st.integers(0, 3), st.integers(0, 2**31))
def test_kept_size_is_min_of_budget_and_length(t, budget, ks, seed):
    want = min(budget, t)
    assert len(random_evict(t, budget, seed)) == want
    if budget >= ks + 1:
        assert len(streaming_evict(t, budget, ks)) == want
    kw = min(budget, 3)
    scores = ScoreVector(np.random.default_rng(seed).random(t))
    assert len(h2o_evict(scores, t, budget, kw)) == want


@given(st.integers(5, 60), st.integers(0, 2**31))
def test_streaming_ignores_scores(t, seed):
    a = streaming_evict(t, 5, 2)
    b = streaming_evict(t, 5, 2)
    assert a.tolist() == b.tolist()


@given(st.integers(0, 2**31))
def test_h2o_depends_only_on_argsort(seed):
    rng = np.random.default_rng(seed)
    s = rng.random(30)
    assert h2o_evict(ScoreVector(s), 30, 12, 4).tolist() == h2o_evict(ScoreVector(s ** 3 + 2), 30, 12, 4).tolist()


@pytest.mark.parametrize("budget,n,want", [(100, 544, 100), (0.5, 544, 272), (0.25, 10, 2)])
def test_budget_policy_tokens(budget, n, want):
    assert BudgetPolicy("h2o", budget).tokens(n) == want


def test_budget_policy_validation():
    with pytest.raises(ValueError):
        BudgetPolicy("lru", 10)
    with pytest.raises(ValueError):
        BudgetPolicy("h2o", 0)
