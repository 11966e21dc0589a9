"""Acceptance suite: one test per primary criterion, at the stated tolerance.

Each test prints a single ``[PASS]``/``[FAIL]`` line with the measured
quantity (visible with ``pytest -s``); pytest's own verdict line is the
authoritative result.
"""

import math
import time
from fractions import Fraction

import numpy as np
import pytest

from mpcache import attention, ring
from mpcache import nonlinear as nl
from mpcache.attention import DecodeTrace, ModelSpec, decode_step, random_prompt, reference_decode, run_decode, synthetic_state
from mpcache.eviction import (
    EvictionConfig,
    accumulate_attention_scores,
    commonality_score,
    covering_ratio,
    default_keep,
    eval_selection_recall,
    hierarchical_select,
    make_layer_cache,
    observation_rows,
    planted_trace,
    sim_exact_max,
    sim_upper_bound,
    static_evict,
    summarize_cluster,
)
from mpcache.harness import RunConfig, run
from mpcache.rss import PartyNet, mul_public, reconstruct, reveal_float, sec_mul, share_float

TOL = 2.0**-8


def verdict(name, ok, detail):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, detail


# 1 ----------------------------------------------------------------------------------


def test_c01_secure_full_cache_decode_matches_plaintext_reference():
    spec = ModelSpec.random(L=4, H=2, d=32, seed=2024)
    prompt = random_prompt(128, spec.D, seed=2024)
    trace = DecodeTrace.generate(8, spec.D, seed=2025)
    cfg = EvictionConfig.preset("none")
    _, ref = reference_decode(spec, prompt, trace)
    start = time.process_time()
    _, outs, _, _ = run_decode(spec, prompt, trace, cfg, "secure", PartyNet(2024), sparse=False)
    elapsed = time.process_time() - start
    err = float(np.max(np.abs(outs - ref)))
    verdict("secure/plaintext equivalence", err <= TOL and elapsed < 120, f"max abs error {err:.3g} (<= 2^-8), {elapsed:.1f} s CPU (< 120 s)")


# 2 ----------------------------------------------------------------------------------


def test_c02_no_eviction_degeneracy():
    spec = ModelSpec.random(L=4, H=2, d=16, seed=7)
    prompt = random_prompt(48, spec.D, seed=7)
    trace = DecodeTrace.generate(4, spec.D, seed=8)
    cfg = EvictionConfig(static_ratio=0.0, levels=((1, 1.0),))
    _, sparse_p, _, _ = run_decode(spec, prompt, trace, cfg)
    _, full_p, _, _ = run_decode(spec, prompt, trace, cfg, sparse=False)
    _, ref = reference_decode(spec, prompt, trace)
    _, sparse_s, _, _ = run_decode(spec, prompt, trace, cfg, "secure", PartyNet(7))
    exact = np.array_equal(sparse_p, full_p)
    ref_err = float(np.max(np.abs(sparse_p - ref)))
    sec_err = float(np.max(np.abs(sparse_s - full_p)))
    verdict("no-eviction degeneracy", exact and ref_err < 1e-12 and sec_err <= TOL,
            f"plaintext sparse == full bitwise: {exact}, vs dense reference {ref_err:.2g}, secure error {sec_err:.3g}")


# 3 ----------------------------------------------------------------------------------


def test_c03_gather_counts_widths_and_ratio():
    rep, code, _ = run(RunConfig(command="bench-gather", T=1024, C=64, k1=256, k2=16, seed=0))
    e = rep.entries
    per = (e["token.equalities_per_index"]["value"], e["cluster.equalities_per_index"]["value"])
    widths = (e["token.bit_widths"]["value"], e["cluster.bit_widths"]["value"])
    ratio = e["model.comm_ratio"]["value"]
    ok = per == (1024, 64) and widths == ({"10": 262144}, {"6": 1024}) and abs(ratio - 426.67) <= 0.01 and code == 0
    verdict("gather count reproduction", ok, f"equalities/index {per}, widths {widths}, formula ratio {ratio:.4f}")


# 4 ----------------------------------------------------------------------------------


def test_c04_upper_bound_soundness():
    rng = np.random.default_rng(4)
    violations = cases = 0
    for d in (8, 64):
        for s in (2, 4, 8, 16):
            for _ in range(1250):
                # dyadic rationals: every product and sum below is exact in float64
                K = rng.integers(-(2**20), 2**20, size=(s, d)) / 1024.0
                q = rng.integers(-(2**20), 2**20, size=d) / 1024.0
                if sim_upper_bound(q, summarize_cluster(K)) < sim_exact_max(q, K):
                    violations += 1
                cases += 1
    verdict("bound soundness", cases >= 10**4 and violations == 0, f"{violations} violations in {cases} cases")


# 5 ----------------------------------------------------------------------------------


def test_c05_case_split_and_reordering_identities():
    rng = np.random.default_rng(5)
    n, d = 10**4, 8
    alpha = Fraction(3, 5)
    raw = rng.integers(-(2**12), 2**12, size=(n, 3, d))
    bad_case = bad_reorder = 0
    for q_i, a_i, b_i in raw:
        q = [Fraction(int(x), 256) for x in q_i]
        rmax = [Fraction(int(max(x, y)), 256) for x, y in zip(a_i, b_i)]
        rmin = [Fraction(int(min(x, y)), 256) for x, y in zip(a_i, b_i)]
        for qi, hi, lo in zip(q, rmax, rmin):
            if max(qi * hi, qi * lo) != (qi * hi if qi >= 0 else qi * lo):
                bad_case += 1
        distributed = sum(alpha * qi * hi + (1 - alpha) * qi * lo for qi, hi, lo in zip(q, rmax, rmin))
        reordered = sum(qi * (alpha * hi + (1 - alpha) * lo) for qi, hi, lo in zip(q, rmax, rmin))
        bad_reorder += distributed != reordered
    # fixed point: both forms evaluated with the secure protocols at f fraction bits
    net = PartyNet(5)
    Q = rng.normal(size=(n, d))
    A, B = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    Rmax, Rmin = np.maximum(A, B), np.minimum(A, B)
    qs, hs, ls = share_float(net, Q), share_float(net, Rmax), share_float(net, Rmin)
    dist = mul_public(net, sec_mul(net, qs, hs).sum(-1), 0.6) + mul_public(net, sec_mul(net, qs, ls).sum(-1), 0.4)
    blended = ls + mul_public(net, hs - ls, 0.6)
    reord = sec_mul(net, qs, blended).sum(-1)
    gap = float(np.max(np.abs(reveal_float(net, dist) - reveal_float(net, reord))))
    fx_tol = d * 2.0 ** -(ring.FRAC_BITS - 1)
    # case split in fixed point: elementwise max of the two products vs sign selection
    pq_hi, pq_lo = reveal_float(net, sec_mul(net, qs, hs)), reveal_float(net, sec_mul(net, qs, ls))
    split = np.where(Q >= 0, pq_hi, pq_lo)
    case_gap = float(np.max(np.abs(np.maximum(pq_hi, pq_lo) - split)))
    ok = bad_case == 0 and bad_reorder == 0 and gap <= fx_tol and case_gap <= fx_tol
    verdict("case-split and reordering identities", ok,
            f"exact mismatches {bad_case}/{bad_reorder} over {n} cases, fixed-point gaps {gap:.3g} and {case_gap:.3g} (<= {fx_tol:.3g})")


# 6 ----------------------------------------------------------------------------------


@pytest.mark.parametrize("alpha", [0.0, 0.6, 1.0])
def test_c06_singleton_clusters_equal_exact_topk(alpha):
    rng = np.random.default_rng(int(alpha * 10) + 60)
    mismatches = 0
    for _ in range(1000):
        H, n, d = 2, int(rng.integers(2, 65)), int(rng.integers(1, 9))
        # dyadic values keep every dot product exact, so ties are real ties
        # and only the tie rule decides them
        K = rng.integers(-64, 65, size=(H, n, d)) / 16.0
        if rng.random() < 0.5:
            K[:, rng.integers(0, n, size=n // 2)] = K[:, rng.integers(0, n, size=1)]
        q = rng.integers(-64, 65, size=(H, d)) / 16.0
        ratio = float(rng.uniform(0.05, 1.0))
        cfg = EvictionConfig(levels=((1, ratio),), alpha=alpha)
        lc = make_layer_cache(K, K, np.broadcast_to(np.arange(n), (H, n)), cfg)
        sel = hierarchical_select(q, lc, cfg)
        k = max(1, math.ceil(ratio * n - 1e-9))
        for h in range(H):
            scores = K[h] @ q[h]
            want = sorted(range(n), key=lambda j: (-scores[j], j))[:k]
            mismatches += set(sel.indices[h].tolist()) != set(want)
    verdict(f"degenerate-cluster exactness (alpha={alpha})", mismatches == 0, f"{mismatches} mismatched sets in 1000 instances")


# 7 ----------------------------------------------------------------------------------

TOPK_COMBOS = [(1, 1), (2, 1), (2, 2), (3, 3), (5, 2), (7, 4), (16, 16), (17, 5), (31, 1), (33, 33),
               (64, 8), (64, 64), (100, 37), (128, 16), (129, 128), (200, 10), (255, 3), (256, 1), (256, 32), (256, 256)]


def test_c07_sec_topk_matches_stable_sort():
    rng = np.random.default_rng(7)
    per_combo = 1000 // len(TOPK_COMBOS)
    wrong = vectors = 0
    ledger_ok = True
    for c, (n, k) in enumerate(TOPK_COMBOS):
        v = rng.normal(size=(per_combo, n)) * 8
        v[: per_combo // 2] = np.round(v[: per_combo // 2])  # plenty of ties
        net = PartyNet(c)
        vs = share_float(net, v)
        before = net.ledger.snapshot()
        idx = nl.sec_topk(net, vs, k)
        cmp = sum(p.comparison_invocations for p in net.ledger.since(before).values())
        ledger_ok &= cmp == per_combo * k * (n - 1)
        got = np.stack([reconstruct(net, i) for i in idx], -1).astype(np.int64)
        for row, vec in zip(got, v):
            want = sorted(range(n), key=lambda j: (-vec[j], j))[:k]
            wrong += row.tolist() != want
            vectors += 1
    verdict("top-k protocol", wrong == 0 and ledger_ok and vectors >= 1000,
            f"{wrong} mismatches over {vectors} vectors; comparisons == k(n-1) per vector: {ledger_ok}")


# 8 ----------------------------------------------------------------------------------


def _brute_force_static(attn, T, ratio):
    H = attn.shape[0]
    W = max(1, math.ceil(0.2 * T - 1e-9))
    keep = list(range(T - W, T))
    budget = math.ceil((1 - ratio) * T - 1e-9)
    out = []
    for h in range(H):
        score = [0.0] * T
        for w in range(attn.shape[1] - W, attn.shape[1]):
            row = attn[h, w]
            for t in range(T):
                score[t] += row[t]
        others = sorted((t for t in range(T) if t not in keep), key=lambda t: (-score[t], t))
        chosen = set(keep) | set(others[: max(0, budget - len(keep))])
        out.append(sorted(chosen))
    return out


def test_c08_static_eviction_matches_brute_force():
    rng = np.random.default_rng(8)
    cfg = EvictionConfig()
    mismatches = 0
    for i in range(1000):
        T = int(rng.integers(1, 513)) if i % 10 else int(rng.integers(1, 16))
        ratio = float(rng.choice([0.0, 0.3, 0.5, 0.7, 0.9]))
        W = observation_rows(T, cfg.observation_window)
        logits = rng.normal(size=(2, W, T)) * 2
        rows = np.arange(T - W, T)
        logits = np.where(np.arange(T)[None, None] > rows[None, :, None], -np.inf, logits)
        attn = nl.plain_softmax(logits)
        got = static_evict(accumulate_attention_scores(attn), ratio, default_keep(T, cfg))
        mismatches += got.tolist() != _brute_force_static(attn, T, ratio)
    verdict("static eviction", mismatches == 0, f"{mismatches} mismatches in 1000 prompts (window = last 20% rows)")


# 9 ----------------------------------------------------------------------------------


def test_c09_commonality_score():
    rng = np.random.default_rng(9)
    bad = 0
    for _ in range(200):
        L, k = int(rng.integers(3, 10)), int(rng.integers(1, 8))
        m = int(rng.integers(1, L))
        sets = [rng.choice(12, k, replace=False).tolist() for _ in range(L)]
        # the definition written out literally, with 1-based layer index l = 1 .. L - m
        total = sum(len(set.intersection(*[set(sets[i - 1]) for i in range(l, l + m + 1)])) for l in range(1, L - m + 1))
        bad += commonality_score(sets, m) != total / (k * (L - m))
    same = commonality_score([[4, 5, 6]] * 6, 3)
    disjoint = commonality_score([[2 * l, 2 * l + 1] for l in range(6)], 1)
    verdict("commonality score", bad == 0 and same == 1.0 and disjoint == 0.0,
            f"{bad} mismatches vs brute force, identical {same}, disjoint {disjoint}")


# 10 ---------------------------------------------------------------------------------


def test_c10_cross_layer_sharing(monkeypatch):
    spec = ModelSpec.random(L=6, H=2, d=8, seed=10)
    cfg = EvictionConfig(share_group=2, share_skip_layers=2, levels=((8, 0.5), (4, 0.5)))
    net = PartyNet(10)
    state = synthetic_state(spec, 64, cfg, "secure", net, seed=10)
    calls = {}
    real = attention.hierarchical_select

    def recording(q, cache, config, net=None, layer=0):
        before = net.ledger.snapshot()
        res = real(q, cache, config, net, layer)
        calls[layer] = net.ledger.since(before)
        return res

    monkeypatch.setattr(attention, "hierarchical_select", recording)
    x = np.random.default_rng(10).normal(size=spec.D)
    before = net.ledger.snapshot()
    _, _, info = decode_step(x, state, spec, cfg, "secure", net)
    step = net.ledger.since(before)
    reusing = [l for l, s in enumerate(info.selections) if s.shared_from is not None]
    identical = all(np.array_equal(info.selections[l].indices.pairs, info.selections[l - 1].indices.pairs) for l in reusing)
    charged = sum(c[p].comparison_invocations + c[p].mul_invocations for c in calls.values() for p in ("similarity", "topk") if p in c)
    total = sum(step[p].comparison_invocations + step[p].mul_invocations for p in ("similarity", "topk"))
    ok = reusing == [3, 5] and sorted(calls) == [0, 1, 2, 4] and identical and charged == total > 0
    verdict("cross-layer sharing", ok, f"reusing layers {reusing}, element-identical {identical}, "
            f"similarity/top-k cost outside computing layers {total - charged}")


# 11 ---------------------------------------------------------------------------------


def test_c11_nonlinear_accuracy():
    rng = np.random.default_rng(11)
    net = PartyNet(11)
    x = rng.normal(size=(256, 64)) * 4
    sm = float(np.max(np.abs(reveal_float(net, nl.sec_softmax(net, share_float(net, x))) - nl.plain_softmax(x))))
    ex = np.linspace(-16, 0, 2001)
    exp_rel = float(np.max(np.abs(reveal_float(net, nl.sec_exp(net, share_float(net, ex))) / np.exp(ex) - 1)))
    lo, hi = nl.RECIP_DOMAIN
    rx = np.concatenate([np.exp(np.linspace(np.log(lo), np.log(hi), 2000)), rng.uniform(lo, hi, 2000)])
    rec_rel = float(np.max(np.abs(reveal_float(net, nl.sec_recip(net, share_float(net, rx))) * rx - 1)))
    ok = sm <= TOL and exp_rel <= 0.02 and rec_rel <= 2.0**-10
    verdict("nonlinear accuracy", ok, f"softmax {sm:.3g} (<= 2^-8), exp rel {exp_rel:.3g} (<= 0.02), recip rel {rec_rel:.3g} (<= 2^-10)")


# 12 ---------------------------------------------------------------------------------


def test_c12_communication_direction():
    spec = ModelSpec.random(L=4, H=2, d=32, seed=12)
    cfg = EvictionConfig.preset("longbench", 0.1)
    x = np.random.default_rng(12).normal(size=spec.D)
    per_step = {}
    for sparse in (True, False):
        net = PartyNet(12)
        state = synthetic_state(spec, 1024, cfg, "secure", net, seed=12)
        before = net.ledger.snapshot()
        decode_step(x, state, spec, cfg, "secure", net, sparse=sparse)
        per_step[sparse] = sum(c.bytes_sent for c in net.ledger.since(before).values())
    ratio = per_step[False] / per_step[True]
    verdict("communication direction", per_step[True] < per_step[False],
            f"per-step bytes sparse {per_step[True]} vs full {per_step[False]} (ratio {ratio:.2f}, reported only)")


# 13 ---------------------------------------------------------------------------------


def test_c13_planted_recall():
    results = []
    for seed in range(3):
        for spans in (((40, 16), (160, 16)), ((48, 16), (160, 16)), ((100, 4), (200, 8))):
            tr = planted_trace(seed=seed, spans=spans)
            for preset in ("longbench", "xsum"):
                base = EvictionConfig.preset(preset)
                eta = covering_ratio(tr, base)
                for ratio in sorted({eta, min(1.0, eta + 0.1), min(1.0, eta + 0.3), 1.0}):
                    results.append(eval_selection_recall(tr, EvictionConfig.preset(preset, ratio)))
    worst = min(results)
    verdict("planted-relevance recall", worst == 1.0, f"minimum recall {worst} over {len(results)} (trace, preset, eta) runs")
