import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mpcache import nonlinear as nl
from mpcache import ring
from mpcache.eviction import (
    PAD_SCORE,
    ConfigError,
    EvictionConfig,
    KVCacheState,
    accumulate_attention_scores,
    append_token,
    apply_cross_layer_sharing,
    blend,
    build_summaries,
    commonality_score,
    covering_ratio,
    default_keep,
    eval_selection_recall,
    hierarchical_select,
    layer_computes,
    level_budget,
    make_layer_cache,
    observation_rows,
    planted_trace,
    read_selection_trace,
    selection_trace_csv,
    sim_exact_max,
    sim_linear,
    sim_upper_bound,
    static_evict,
    summarize_cluster,
)
from mpcache.rss import PartyNet, reconstruct, reveal_float, share_float

# -- config -------------------------------------------------------------------------


def test_config_roundtrip_and_defaults():
    cfg = EvictionConfig()
    assert cfg.alpha == 0.6 and cfg.observation_window == 0.2
    assert (cfg.share_group, cfg.share_skip_layers) == (2, 2)
    back = EvictionConfig.from_json(cfg.to_json())
    assert back == cfg


def test_config_validation_lists_every_problem():
    cfg = EvictionConfig(static_ratio=1.5, alpha=2.0, levels=((16, 0.5), (32, 0.0)))
    errs = cfg.validate()
    assert len(errs) == 4
    with pytest.raises(ConfigError):
        cfg.check()
    with pytest.raises(ConfigError, match="unknown"):
        EvictionConfig.from_dict({"eta": 0.1})


def test_presets():
    lb = EvictionConfig.preset("longbench", 0.1)
    assert lb.cluster_sizes == [32, 16] and lb.final_ratio == 0.1
    assert EvictionConfig.preset("xsum").cluster_sizes == [8, 4]
    none = EvictionConfig.preset("none")
    assert none.levels == ((1, 1.0),) and none.static_ratio == 0
    with pytest.raises(ConfigError):
        EvictionConfig.preset("gpt")


# -- static eviction -----------------------------------------------------------------


def test_accumulate_single_row_onehot():
    attn = np.zeros((1, 1, 5))
    attn[0, 0, 3] = 1
    assert accumulate_attention_scores(attn).tolist() == [[0, 0, 0, 1, 0]]


def test_accumulate_uniform_causal_closed_form():
    T, W = 10, 4
    rows = np.arange(T - W, T)
    attn = np.where(np.arange(T)[None] <= rows[:, None], 1.0 / (rows[:, None] + 1), 0.0)[None]
    want = [sum(1.0 / (r + 1) for r in rows if r >= j) for j in range(T)]
    assert np.allclose(accumulate_attention_scores(attn)[0], want)


def test_accumulate_matches_double_loop(rng):
    a = rng.random((2, 5, 9))
    want = np.zeros((2, 9))
    for h in range(2):
        for w in range(5):
            for t in range(9):
                want[h, t] += a[h, w, t]
    assert np.allclose(accumulate_attention_scores(a), want)


def test_static_examples():
    assert static_evict(np.array([[3.0, 1.0, 2.0, 0.0]]), 0.5).tolist() == [[0, 2]]
    assert static_evict(np.ones((1, 4)), 0.5).tolist() == [[0, 1]]
    assert static_evict(np.array([[5.0, 1.0, 2.0]]), 0.0).tolist() == [[0, 1, 2]]
    assert static_evict(np.array([[5.0, 1.0, 2.0, 9.0]]), 1.0, [1]).tolist() == [[1]]


def test_always_keep_is_forced_in():
    s = np.array([[9.0, 8.0, 7.0, 0.0, 0.0, 0.0]])
    assert static_evict(s, 0.5, [4, 5]).tolist() == [[0, 4, 5]]
    with pytest.raises(ValueError):
        static_evict(s, 0.5, [6])


def test_observation_window():
    assert observation_rows(100, 0.2) == 20
    assert observation_rows(3, 0.2) == 1
    assert default_keep(10, EvictionConfig()).tolist() == [8, 9]
    assert default_keep(10, EvictionConfig(always_keep="none")).size == 0


def test_shared_head_scores():
    s = np.array([[1.0, 0.0, 5.0, 0.0], [1.0, 3.0, 0.0, 0.0]])
    out = static_evict(s, 0.5, per_head=False)  # summed scores [2, 3, 5, 0]
    assert out.tolist() == [[1, 2], [1, 2]]


@pytest.mark.parametrize("per_head", [True, False])
def test_secure_static_agrees_with_plaintext(per_head, rng):
    for trial in range(3):
        T = int(rng.integers(8, 40))
        scores = rng.random((2, T))
        keep = np.arange(T - 3, T)
        want = static_evict(scores, 0.5, keep, per_head=per_head)
        net = PartyNet(trial)
        got = static_evict(share_float(net, scores), 0.5, keep, net=net, per_head=per_head)
        assert got.count == want.shape[1]
        assert reconstruct(net, got.positions).tolist() == want.tolist()
        assert net.ledger["static"].comparison_invocations > 0


def test_secure_static_nothing_evicted_is_free(net):
    got = static_evict(share_float(net, np.ones((2, 6))), 0.0, net=net)
    assert got.selector is None and got.positions.tolist() == [list(range(6))] * 2
    assert "static" not in net.ledger.phases


# -- summaries and similarity --------------------------------------------------------------


def test_summary_examples(rng):
    k = rng.normal(size=6)
    s = summarize_cluster(np.stack([k, -k]))
    assert np.array_equal(s.r_max, np.abs(k)) and np.array_equal(s.r_min, -np.abs(k))
    one = summarize_cluster(k[None], start=4)
    assert np.array_equal(one.r_max, one.r_min) and one.token_span == (4, 5)


def test_bound_examples(rng):
    K = rng.normal(size=(5, 4))
    q = np.abs(rng.normal(size=4))
    s = summarize_cluster(K)
    assert sim_upper_bound(q, s) == pytest.approx(q @ s.r_max)
    k = K[:1]
    assert sim_upper_bound(q, summarize_cluster(k)) == pytest.approx(float(k[0] @ q))
    assert sim_exact_max(np.zeros(4), K) == 0.0


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([2, 4, 8, 16]), st.sampled_from([8, 64]))
def test_bound_is_sound(seed, s, d):
    rng = np.random.default_rng(seed)
    K = rng.normal(size=(s, d)) * rng.uniform(0.1, 10)
    q = rng.normal(size=d)
    assert sim_upper_bound(q, summarize_cluster(K)) >= sim_exact_max(q, K) - 1e-9 * (1 + np.abs(K).max() * np.abs(q).sum())


def test_sim_linear_endpoints(rng):
    K, q = rng.normal(size=(4, 3)), rng.normal(size=3)
    s = summarize_cluster(K)
    assert sim_linear(q, s, 1.0) == pytest.approx(q @ s.r_max)
    assert sim_linear(q, s, 0.0) == pytest.approx(q @ s.r_min)
    one = summarize_cluster(K[:1])
    assert sim_linear(q, one, 0.37) == pytest.approx(q @ K[0])
    with pytest.raises(ValueError):
        sim_linear(q, s, 1.2)


def test_build_summaries_brute_force_and_reducible(rng):
    K = rng.normal(size=(2, 64, 3))
    coarse, fine = build_summaries(K, [16, 4])
    for h in range(2):
        for c in range(16):
            blk = K[h, 4 * c : 4 * c + 4]
            assert np.array_equal(fine.r_max[h, c], blk.max(0)) and np.array_equal(fine.r_min[h, c], blk.min(0))
    assert np.array_equal(coarse.r_max, fine.r_max.reshape(2, 4, 4, 3).max(2))
    assert np.array_equal(coarse.r_min, fine.r_min.reshape(2, 4, 4, 3).min(2))
    assert np.allclose(fine.blend, blend(fine.r_max, fine.r_min, 0.6))
    with pytest.raises(ValueError):
        build_summaries(K, [4, 16])


def test_short_cache_is_one_ragged_cluster(rng):
    K = rng.normal(size=(5, 3))
    (lv,) = build_summaries(K, [8])
    assert lv.n_clusters == 1 and not lv.pad[0]
    assert np.array_equal(lv.r_max[0], K.max(0))


def test_secure_summaries_match_plaintext(net, rng):
    K = rng.normal(size=(2, 32, 4))
    valid = np.arange(32) < 27
    plain = build_summaries(K, [8, 4], valid)
    sec = build_summaries(share_float(net, K), [8, 4], valid, net=net)
    for p, s in zip(plain, sec):
        assert np.array_equal(p.pad, s.pad)
        assert np.allclose(reveal_float(net, s.r_max), p.r_max, atol=2**-17)
        assert np.allclose(reveal_float(net, s.r_min), p.r_min, atol=2**-17)
        assert np.allclose(reveal_float(net, s.blend), p.blend, atol=2**-15)
    assert plain[1].pad.tolist() == [False] * 6 + [False, True]
    assert plain[1].bias[-1] == PAD_SCORE


# -- hierarchical selection ---------------------------------------------------------------


def _cache(K, cfg, net=None):
    H, n, _ = K.shape
    pos = np.broadcast_to(np.arange(n), (H, n))
    if net is not None:
        K = share_float(net, K)
    return make_layer_cache(K, K, pos, cfg, net)


def test_level_budget():
    assert level_budget(0.4, 64, 32) == 26
    assert level_budget(0.01, 10, 10) == 1
    assert level_budget(1.0, 64, 20) == 20


def test_no_eviction_selects_everything(rng):
    cfg = EvictionConfig.preset("none")
    K = rng.normal(size=(2, 20, 4))
    sel = hierarchical_select(rng.normal(size=(2, 4)), _cache(K, cfg), cfg)
    assert [sorted(r) for r in sel.indices.tolist()] == [list(range(20))] * 2


@pytest.mark.parametrize("alpha", [0.0, 0.6, 1.0])
def test_singleton_clusters_equal_exact_topk(alpha, rng):
    cfg = EvictionConfig(levels=((1, 0.3),), alpha=alpha)
    K = np.round(rng.normal(size=(2, 30, 4)), 1)
    q = np.round(rng.normal(size=(2, 4)), 1)
    sel = hierarchical_select(q, _cache(K, cfg), cfg)
    want = nl.plain_topk(np.einsum("hnd,hd->hn", K, q), 9)
    assert np.array_equal(sel.indices, want)


def test_two_level_budget_and_planted_cluster(rng):
    cfg = EvictionConfig.preset("longbench", 0.1)
    K = rng.normal(size=(2, 1024, 8)) * 0.1
    q = rng.normal(size=(2, 8))
    K[:, 16 * 37 : 16 * 38] = 10 * q[:, None, :] / np.linalg.norm(q, axis=-1)[:, None, None]
    sel = hierarchical_select(q, _cache(K, cfg), cfg)
    assert sel.indices.shape == (2, math.ceil(0.1 * 64))
    assert all(37 in row for row in sel.indices.tolist())
    assert all(len(set(row)) == len(row) for row in sel.indices.tolist())


@pytest.mark.parametrize("preset,ratio", [("longbench", 0.1), ("xsum", 0.2)])
def test_secure_selection_agrees_with_plaintext(preset, ratio, rng):
    cfg = EvictionConfig.preset(preset, ratio)
    n = 200
    K = rng.normal(size=(2, n, 4))
    q = rng.normal(size=(2, 4))
    plain = hierarchical_select(q, _cache(K, cfg), cfg)
    net = PartyNet(3)
    sec = hierarchical_select(share_float(net, q), _cache(K, cfg, net), cfg, net)
    got = reconstruct(net, sec.indices).astype(np.int64)
    assert [sorted(r) for r in got.tolist()] == [sorted(r) for r in plain.indices.tolist()]
    assert net.ledger["similarity"].mul_invocations > 0 and net.ledger["topk"].comparison_invocations > 0


def test_append_and_close_block(rng):
    cfg = EvictionConfig(levels=((4, 0.5), (2, 0.5)))
    lc = _cache(rng.normal(size=(1, 8, 2)), cfg)
    for t in range(4):
        append_token(lc, rng.normal(size=(1, 2)), rng.normal(size=(1, 2)), 8 + t, cfg)
    assert lc.n_open == 0 and lc.K.shape[1] == 12 and lc.retained_count == 12
    assert lc.summaries[0].n_clusters == 3 and lc.summaries[1].n_clusters == 6
    assert lc.positions[0, 8:].tolist() == [8, 9, 10, 11]
    fresh = build_summaries(lc.K[0], [4, 2])[1]
    assert np.array_equal(lc.summaries[1].r_max[0], fresh.r_max)


def test_state_retained_count_consistency(rng):
    cfg = EvictionConfig.preset("xsum")
    a, b = _cache(rng.normal(size=(1, 8, 2)), cfg), _cache(rng.normal(size=(1, 9, 2)), cfg)
    with pytest.raises(AssertionError):
        KVCacheState([a, b], cfg, 8).retained_count


# -- cross-layer sharing -------------------------------------------------------------------


def test_sharing_enumeration():
    cfg = EvictionConfig(share_group=2, share_skip_layers=2)
    assert [l for l in range(6) if not layer_computes(l, cfg)] == [3, 5]
    assert all(layer_computes(l, EvictionConfig(share_group=1)) for l in range(6))


def test_shared_result_is_identical_and_free(rng):
    cfg = EvictionConfig(share_group=2, share_skip_layers=2, levels=((4, 0.5),))
    K = rng.normal(size=(2, 16, 3))
    net = PartyNet(0)
    lc = _cache(K, cfg, net)
    prev = None
    results = []
    for layer in range(6):
        q = share_float(net, rng.normal(size=(2, 3)))
        after_input = net.ledger.snapshot()
        prev = apply_cross_layer_sharing(layer, prev, cfg, lambda: hierarchical_select(q, lc, cfg, net, layer))
        cost = net.ledger.since(after_input)
        results.append((prev, cost))
    for layer in (3, 5):
        sel, cost = results[layer]
        src, _ = results[layer - 1]
        assert sel.shared_from == layer - 1
        assert np.array_equal(sel.indices.pairs, src.indices.pairs)
        assert cost == {}
    for layer in (0, 1, 2, 4):
        assert results[layer][0].shared_from is None and "topk" in results[layer][1]


# -- commonality ---------------------------------------------------------------------------


def test_commonality_extremes():
    same = [[1, 2, 3]] * 5
    assert commonality_score(same, 2) == 1.0
    disjoint = [[3 * i, 3 * i + 1, 3 * i + 2] for i in range(5)]
    assert commonality_score(disjoint, 1) == 0.0
    with pytest.raises(ValueError):
        commonality_score(same, 5)


def test_commonality_brute_force(rng):
    L, k, m = 8, 6, 2
    sets = [rng.choice(20, k, replace=False) for _ in range(L)]
    total = 0
    for l in range(L - m):
        total += sum(all(x in sets[i] for i in range(l, l + m + 1)) for x in sets[l])
    assert commonality_score(sets, m) == total / (k * (L - m))


def test_trace_csv_roundtrip():
    rows = [(0, 0, 0, [3, 1]), (0, 1, 0, [1, 4])]
    parsed = read_selection_trace(selection_trace_csv(rows))
    assert parsed == {(0, 0): {0: [3, 1], 1: [1, 4]}}
    with pytest.raises(ValueError, match="line 2"):
        read_selection_trace("step,layer,head,indices\n0,x,0,1 2\n")


# -- planted recall -------------------------------------------------------------------------


@pytest.mark.parametrize("preset", ["longbench", "xsum"])
def test_planted_recall_full_when_budget_covers(preset):
    tr = planted_trace(seed=4)
    cfg = EvictionConfig.preset(preset, 0.1)
    eta = covering_ratio(tr, cfg)
    for ratio in (eta, min(1.0, eta + 0.15)):
        assert eval_selection_recall(tr, EvictionConfig.preset(preset, ratio)) == 1.0


def test_planted_recall_rejects_empty_truth():
    tr = planted_trace(seed=0)
    tr.relevant = [np.array([], dtype=np.int64)]
    with pytest.raises(ValueError):
        eval_selection_recall(tr, EvictionConfig())
