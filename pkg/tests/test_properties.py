"""Property tests for the invariants that hold for every input."""

import math

import numpy as np
from hypothesis import given, settings, strategies as st

from mpcache import ring
from mpcache import nonlinear as nl
from mpcache.eviction import (
    EvictionConfig,
    build_summaries,
    commonality_score,
    hierarchical_select,
    make_layer_cache,
    static_evict,
)
from mpcache.gather import gather_tokens
from mpcache.rss import PartyNet, reconstruct, share, share_float

seeds = st.integers(0, 2**32 - 1)


@settings(max_examples=80, deadline=None)
@given(seeds, st.integers(1, 80), st.sampled_from([0.0, 0.25, 0.5, 0.9, 1.0]), st.integers(0, 10))
def test_static_evict_invariants(seed, T, ratio, n_keep):
    rng = np.random.default_rng(seed)
    scores = rng.random((3, T))
    keep = np.arange(max(0, T - n_keep), T)
    out = static_evict(scores, ratio, keep)
    budget = math.ceil((1 - ratio) * T - 1e-9)
    assert out.shape == (3, max(budget, keep.size))
    for h, row in enumerate(out):
        assert np.all(np.diff(row) > 0)  # sorted, no duplicates
        assert set(keep.tolist()) <= set(row.tolist())
        dropped = np.setdiff1d(np.arange(T), row)
        kept_free = np.setdiff1d(row, keep)
        if dropped.size and kept_free.size:
            assert scores[h, kept_free].min() >= scores[h, dropped].max()


@settings(max_examples=60, deadline=None)
@given(seeds, st.integers(1, 70), st.sampled_from([[1], [4], [8, 4], [16, 4, 2]]))
def test_summaries_bracket_every_key(seed, n, sizes):
    rng = np.random.default_rng(seed)
    K = rng.normal(size=(2, n, 3))
    levels = build_summaries(K, sizes)
    S = sizes[0]
    for lv in levels:
        assert np.all(lv.r_min <= lv.r_max)
        for c in range(lv.n_clusters):
            rows = K[:, c * lv.size : min(n, (c + 1) * lv.size)]
            if rows.shape[1] == 0:
                assert lv.pad[c]
                continue
            assert np.all(rows.max(1) == lv.r_max[:, c]) and np.all(rows.min(1) == lv.r_min[:, c])
        assert lv.n_clusters * lv.size == max(1, math.ceil(n / S)) * S


@settings(max_examples=60, deadline=None)
@given(seeds, st.integers(2, 9), st.integers(1, 6))
def test_commonality_in_unit_interval(seed, L, k):
    rng = np.random.default_rng(seed)
    sets = [rng.choice(10, k, replace=False) for _ in range(L)]
    assert all(0.0 <= commonality_score(sets, m) <= 1.0 for m in range(1, L))
    assert commonality_score([sets[0]] * L, L - 1) == 1.0


@settings(max_examples=30, deadline=None)
@given(seeds, st.sampled_from([(8, 1), (16, 2), (24, 4), (32, 8)]), st.integers(1, 4))
def test_gather_returns_addressed_rows(seed, shape, m):
    n, s = shape
    rng = np.random.default_rng(seed)
    net = PartyNet(seed % 1000)
    K = rng.normal(size=(n, 2))
    C = n // s
    ids = rng.integers(0, C, size=m)
    out = gather_tokens(net, share_float(net, K), share(net, ids, 0, width=ring.bit_width(C)), "cluster", s)
    rows = (ids[:, None] * s + np.arange(s)).ravel()
    assert np.array_equal(reconstruct(net, out), ring.fx_encode(K[rows]))


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(8, 100), st.sampled_from([((8, 0.5), (4, 0.3)), ((16, 0.6), (8, 0.5), (2, 0.2)), ((4, 0.25),)]))
def test_selection_budget_and_uniqueness(seed, n, levels):
    rng = np.random.default_rng(seed)
    cfg = EvictionConfig(levels=levels)
    K = rng.normal(size=(2, n, 3))
    lc = make_layer_cache(K, K, np.broadcast_to(np.arange(n), (2, n)), cfg)
    sel = hierarchical_select(rng.normal(size=(2, 3)), lc, cfg)
    for row in sel.indices.tolist():
        assert len(set(row)) == len(row)
        assert all(not lc.summaries[-1].pad[c] for c in row)
    # the last level keeps at most ceil(ratio * real clusters), and at least one
    fine = lc.summaries[-1]
    assert 1 <= sel.k <= max(1, math.ceil(levels[-1][1] * int((~fine.pad).sum()) - 1e-9))


@settings(max_examples=30, deadline=None)
@given(seeds, st.integers(1, 40))
def test_sec_max_is_first_maximum(seed, n):
    rng = np.random.default_rng(seed)
    v = np.round(rng.normal(size=(2, n)) * 2)
    net = PartyNet(seed % 997)
    val, idx = nl.sec_max(net, share_float(net, v))
    assert reconstruct(net, idx).tolist() == np.argmax(v, axis=-1).tolist()
    assert np.array_equal(reconstruct(net, val), ring.fx_encode(v.max(-1)))
