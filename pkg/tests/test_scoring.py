import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tierkv.scoring import (
    RkvParams,
    ScoreVector,
    StepAttention,
    ToyDecodeInstance,
    average_ranks,
    eviction_order,
    fd_gradients,
    max_cosine_to_others,
    max_pool_1d,
    neighbor_redundancy,
    score_combined,
    score_gradient_fd,
    score_redundancy,
    score_rkv,
    score_vatp,
    spearman_rho,
    update_cumulative,
    value_norms,
    windowed_attention,
)


def simplex(rng, shape):
    w = rng.random(shape)
    return w / w.sum(axis=-1, keepdims=True)


def step_attn(w, nan_layers=(), step=1, positions=None):
    positions = np.arange(w.shape[-1]) if positions is None else positions
    return StepAttention(positions, w, frozenset(nan_layers), step)


def test_single_layer_head_update():
    s = update_cumulative(ScoreVector(np.zeros(2)), step_attn(np.array([[[0.2, 0.8]]])))
    assert s.s.tolist() == [0.2, 0.8]


def test_nan_layer_is_ignored(rng):
    good = simplex(rng, (1, 3, 5))
    w = np.concatenate([good, np.full((1, 3, 5), np.nan)])
    both = update_cumulative(ScoreVector(), step_attn(w, nan_layers={1}))
    alone = update_cumulative(ScoreVector(), step_attn(good))
    assert both.s.tolist() == alone.s.tolist()


def test_all_layers_nan_raises():
    with pytest.raises(ValueError, match="no valid layers"):
        update_cumulative(ScoreVector(), step_attn(np.full((2, 1, 3), np.nan), nan_layers={0, 1}))


def test_update_matches_nested_loop(rng):
    w = simplex(rng, (3, 2, 7))
    prior = rng.random(7)
    got = update_cumulative(ScoreVector(prior.copy()), step_attn(w)).s
    want = prior.copy()
    for i in range(7):
        layer_means = [sum(w[l, h, i] for h in range(2)) / 2 for l in range(3)]
        want[i] += sum(layer_means) / 3
    assert got == pytest.approx(want, abs=1e-15)


def test_new_positions_start_at_zero(rng):
    s = update_cumulative(ScoreVector(np.array([1.0, 2.0])), step_attn(simplex(rng, (1, 1, 4))))
    assert len(s) == 4 and s.s[2] < 1 and s.s[3] < 1


@given(st.integers(1, 30), st.integers(0, 2**32 - 1))
def test_monotone_and_mass_conserving(steps, seed):
    rng = np.random.default_rng(seed)
    s = ScoreVector()
    for t in range(1, steps + 1):
        prev = s.extended(t + 2).s
        s = update_cumulative(s, step_attn(simplex(rng, (2, 3, t + 2)), step=t))
        assert np.all(s.s >= prev)
    assert abs(s.s.sum() - steps) <= 1e-6


def test_vatp_unit_norms_keep_ranking(rng):
    base = ScoreVector(rng.random(10))
    v = score_vatp(base, np.ones(10))
    assert np.argsort(v.s).tolist() == np.argsort(base.s).tolist()


def test_vatp_zero_norm_zeroes_score(rng):
    norms = rng.random(5) + 0.1
    norms[2] = 0.0
    assert score_vatp(ScoreVector(rng.random(5)), norms).s[2] == 0.0


def test_vatp_elementwise_product(rng):
    base, norms = rng.random(10), rng.random(10)
    assert score_vatp(ScoreVector(base), norms).s.tolist() == [a * b for a, b in zip(base, norms)]


def test_vatp_length_mismatch():
    with pytest.raises(ValueError, match="length mismatch"):
        score_vatp(ScoreVector(np.ones(3)), np.ones(4))


def test_value_norms_average_over_layers_and_heads(rng):
    v = rng.standard_normal((2, 3, 4, 5))
    want = [np.mean([np.linalg.norm(v[l, h, i]) for l in range(2) for h in range(3)]) for i in range(4)]
    assert value_norms(v) == pytest.approx(want, abs=1e-14)


def test_redundancy_orthogonal_neighbours():
    keys = np.eye(4)
    base = ScoreVector(np.array([0.1, 0.2, 0.3, 0.4]))
    assert neighbor_redundancy(keys).tolist() == [0.0] * 4
    assert score_redundancy(keys, base).s.tolist() == base.s.tolist()


def test_redundancy_duplicate_pair():
    keys = np.array([[1.0, 0.0, 0.0], [0.3, 0.2, 0.9], [0.3, 0.2, 0.9], [0.0, 1.0, 0.0]])
    r = neighbor_redundancy(keys)
    assert r[1] == pytest.approx(1.0) and r[2] == pytest.approx(1.0)


def test_redundancy_single_position():
    assert neighbor_redundancy(np.array([[1.0, 2.0]])).tolist() == [0.0]


def test_redundancy_matches_pairwise_cosine(rng):
    keys = rng.standard_normal((8, 5))
    cos = lambda a, b: float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    want = [max(cos(keys[i], keys[j]) for j in (i - 1, i + 1) if 0 <= j < 8) for i in range(8)]
    assert neighbor_redundancy(keys) == pytest.approx(want, abs=1e-12)


def test_combined_score(rng):
    keys, base, norms = rng.standard_normal((6, 3)), rng.random(6), rng.random(6)
    got = score_combined(keys, ScoreVector(base), norms).s
    assert got == pytest.approx(base * norms - neighbor_redundancy(keys), abs=1e-15)


@pytest.mark.parametrize("x,k,want", [
    ([1, 5, 2, 0, 0, 3], 3, [5, 5, 5, 2, 3, 3]),
    ([1, 5, 2, 0, 0, 3], 1, [1, 5, 2, 0, 0, 3]),
    ([4, 1, 1, 1, 1, 1, 2], 7, [4, 4, 4, 4, 2, 2, 2]),
])
def test_max_pool_edges(x, k, want):
    assert max_pool_1d(np.array(x, dtype=float), k).tolist() == want


def _rkv_oracle(history, keys, lam, window, kernel):
    steps = history[-window:]
    n = keys.shape[0]
    imp = [sum(sa.mean_weights()[i] for sa in steps) / len(steps) for i in range(n)]
    half = kernel // 2
    pooled = [max(imp[max(0, i - half): min(n, i + half + 1)]) for i in range(n)]
    red = []
    for i in range(n):
        best = -np.inf
        for j in range(n):
            if j != i:
                c = keys[i] @ keys[j] / (np.linalg.norm(keys[i]) * np.linalg.norm(keys[j]))
                best = max(best, c)
        red.append(best)
    return [lam * a - (1 - lam) * b for a, b in zip(pooled, red)]


def test_rkv_matches_brute_force(rng):
    hist = [step_attn(simplex(rng, (2, 2, 12)), step=t) for t in range(1, 11)]
    keys = rng.standard_normal((12, 4))
    got = score_rkv(hist, keys, RkvParams()).s
    assert got == pytest.approx(_rkv_oracle(hist, keys, 0.07, 8, 7), abs=1e-12)


def test_rkv_lambda_one_is_pooled_importance(rng):
    hist = [step_attn(simplex(rng, (1, 2, 9)), step=t) for t in range(1, 9)]
    keys = rng.standard_normal((9, 3))
    z = score_rkv(hist, keys, RkvParams(lam=1.0)).s
    pooled = max_pool_1d(windowed_attention(hist, np.arange(9), 8), 7)
    assert np.argsort(z, kind="stable").tolist() == np.argsort(pooled, kind="stable").tolist()


def test_rkv_lambda_one_kernel_one_is_windowed_mean(rng):
    hist = [step_attn(simplex(rng, (1, 2, 9)), step=t) for t in range(1, 12)]
    z = score_rkv(hist, rng.standard_normal((9, 3)), RkvParams(lam=1.0, pool_kernel=1)).s
    mean = windowed_attention(hist, np.arange(9), 8)
    assert np.argsort(z, kind="stable").tolist() == np.argsort(mean, kind="stable").tolist()


def test_rkv_lambda_zero_orthogonal_keys_all_equal(rng):
    hist = [step_attn(simplex(rng, (1, 1, 5)))]
    z = score_rkv(hist, np.eye(5), RkvParams(lam=0.0)).s
    assert len(set(z.tolist())) == 1


def test_rkv_uses_available_steps_when_short(rng):
    hist = [step_attn(simplex(rng, (1, 1, 6)), step=t) for t in range(1, 4)]
    keys = rng.standard_normal((6, 2))
    got = score_rkv(hist, keys, RkvParams()).s
    assert got == pytest.approx(_rkv_oracle(hist, keys, 0.07, 8, 7), abs=1e-12)


@pytest.mark.parametrize("kw", [dict(lam=1.5), dict(alpha_window=0), dict(pool_kernel=4)])
def test_rkv_param_validation(kw):
    with pytest.raises(ValueError):
        RkvParams(**kw)


def test_max_cosine_candidates():
    keys = np.array([[1.0, 0.0], [1.0, 0.1], [0.0, 1.0]])
    r = max_cosine_to_others(keys, np.array([False, True, True]))
    assert r[1] == pytest.approx(keys[1] @ keys[2] / np.linalg.norm(keys[1]))


def _toy(rng, t=6, d=3):
    return ToyDecodeInstance(rng.standard_normal(d), rng.standard_normal((t, d)),
                             rng.standard_normal((t, d)), rng.standard_normal(d))


def _analytic(inst):
    d = len(inst.query)
    a = np.exp(inst.keys @ inst.query / math.sqrt(d))
    a /= a.sum()
    o = a @ inst.values
    g_o = o - inst.target
    g_v = np.outer(a, g_o)
    s = inst.values @ g_o
    g_logit = a * (s - a @ s)
    g_k = np.outer(g_logit, inst.query) / math.sqrt(d)
    return g_k, g_v


def test_fd_matches_analytic_gradient(rng):
    inst = _toy(rng)
    gk, gv = fd_gradients(inst)
    ak, av = _analytic(inst)
    assert np.linalg.norm(gk - ak) <= 1e-4 * np.linalg.norm(ak)
    assert np.linalg.norm(gv - av) <= 1e-4 * np.linalg.norm(av)
    score = score_gradient_fd(inst).s
    assert score == pytest.approx(np.linalg.norm(ak, axis=1) + np.linalg.norm(av, axis=1), rel=1e-4)


def test_fd_value_gradient_scales_with_weight(rng):
    inst = _toy(rng, t=4, d=2)
    _, gv = fd_gradients(inst)
    a = np.exp(inst.keys @ inst.query / math.sqrt(2))
    a /= a.sum()
    g_o = inst.output() - inst.target
    assert np.linalg.norm(gv, axis=1) == pytest.approx(a * np.linalg.norm(g_o), rel=1e-5)


def test_fd_zero_weight_position_has_tiny_value_gradient():
    q = np.array([60.0, 0.0])
    keys = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 0.0]])
    inst = ToyDecodeInstance(q, keys, np.eye(3, 2), np.zeros(2))
    _, gv = fd_gradients(inst)
    assert np.linalg.norm(gv[1]) < 1e-12


def test_fd_non_finite_loss():
    inst = ToyDecodeInstance(np.ones(2), np.ones((2, 2)), np.full((2, 2), np.inf), np.zeros(2))
    with pytest.raises(ValueError, match="non-finite"):
        score_gradient_fd(inst)


def test_fd_size_limit(rng):
    with pytest.raises(ValueError):
        fd_gradients(_toy(rng, t=65, d=2))


def test_spearman_identity_and_reverse():
    a = [3.0, 1.0, 4.0, 1.5, 9.0]
    assert spearman_rho(a, a) == 1.0
    assert spearman_rho([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0


def test_spearman_tied_oracle():
    a, b = [1, 2, 3, 4, 5], [5, 6, 7, 8, 7]
    ra, rb = [1, 2, 3, 4, 5], [1, 2, 3.5, 5, 3.5]
    ma, mb = sum(ra) / 5, sum(rb) / 5
    cov = sum((x - ma) * (y - mb) for x, y in zip(ra, rb))
    want = cov / math.sqrt(sum((x - ma) ** 2 for x in ra) * sum((y - mb) ** 2 for y in rb))
    assert spearman_rho(a, b) == pytest.approx(want, abs=1e-12)


def test_spearman_constant_input():
    with pytest.raises(ValueError, match="undefined correlation"):
        spearman_rho([1, 1, 1], [1, 2, 3])


def test_spearman_agrees_with_scipy(rng):
    from scipy.stats import spearmanr
    a, b = rng.integers(0, 5, 30), rng.integers(0, 5, 30)
    assert spearman_rho(a, b) == pytest.approx(spearmanr(a, b).statistic, abs=1e-9)


@given(st.lists(st.integers(-3, 3), min_size=1, max_size=20))
def test_average_ranks_sum(x):
    r = average_ranks(x)
    assert r.sum() == pytest.approx(len(x) * (len(x) + 1) / 2)


def test_eviction_order_ties_oldest_first():
    s = np.array([0.5, 0.1, 0.5, 0.1, 0.9])
    assert eviction_order(s, np.arange(5)).tolist() == [1, 3, 0, 2, 4]
