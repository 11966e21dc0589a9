"""Toy multi-head attention stack with a KV cache, in plaintext and secure mode.

The model is a residual stack of attention layers only:
``x <- x + Attn(x W_q, x W_k, x W_v) W_o`` with H independent heads of size d.
There are no embeddings, MLPs or norms; inputs are embedding vectors.

Secure mode keeps weights, activations and the cache secret-shared in a
``PartyNet``; ledger phases are ``input``, ``linear``, ``matmul``,
``softmax``, ``static``, ``summary``, ``similarity``, ``topk`` and ``gather``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import mpct, ring
from .eviction import (
    PAD_LOGIT,
    EvictionConfig,
    KVCacheState,
    accumulate_attention_scores,
    append_token,
    apply_cross_layer_sharing,
    close_if_full,
    default_keep,
    hierarchical_select,
    layer_computes,
    make_layer_cache,
    observation_rows,
    selection_onehot,
    static_evict,
)
from .gather import gather_with_onehot
from .nonlinear import plain_softmax, sec_softmax
from .rss import PartyNet, ShareTensor, concat, mul_public, public, reveal_float, sec_matmul, share_float

QKVO = ("q", "k", "v", "o")


@dataclass
class ModelSpec:
    """L layers of H heads with head size d; ``weights`` is [L, 4, D, D]
    holding W_q, W_k, W_v, W_o per layer (D = H d)."""

    L: int
    H: int
    d: int
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        want = (self.L, 4, self.D, self.D)
        if self.weights.shape != want:
            raise ValueError(f"weights have shape {self.weights.shape}, expected {want}")

    @property
    def D(self) -> int:
        return self.H * self.d

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.d)

    @classmethod
    def random(cls, L: int = 4, H: int = 2, d: int = 32, seed: int = 0) -> "ModelSpec":
        rng = np.random.default_rng(seed)
        D = H * d
        return cls(L, H, d, rng.normal(scale=1.0 / math.sqrt(D), size=(L, 4, D, D)))

    @classmethod
    def from_mpct(cls, path, H: int, d: int) -> "ModelSpec":
        w = mpct.load(path, expect_shape=(None, 4, H * d, H * d))
        if w.dtype != np.float64:
            raise mpct.MPCTError("weights must be stored as real (dtype 0) tensors", 5)
        return cls(w.shape[0], H, d, w)

    def save(self, path) -> None:
        mpct.save(path, self.weights)


@dataclass
class DecodeTrace:
    """Per-step input embeddings [E, D] (or a seed to generate them)."""

    embeddings: np.ndarray
    relevant: list | None = None

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise ValueError("a decode trace needs at least one step of [E, D] embeddings")

    @property
    def steps(self) -> int:
        return self.embeddings.shape[0]

    @classmethod
    def generate(cls, E: int, D: int, seed: int = 0) -> "DecodeTrace":
        return cls(np.random.default_rng(seed).normal(size=(E, D)))

    @classmethod
    def from_mpct(cls, path, D: int) -> "DecodeTrace":
        arr = mpct.load(path, expect_shape=(None, D))
        if arr.dtype != np.float64:
            raise mpct.MPCTError("embeddings must be stored as real (dtype 0) tensors", 5)
        return cls(arr)


def random_prompt(T: int, D: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed + 7919).normal(size=(T, D))


# -- helpers ---------------------------------------------------------------------

def _split(x, H: int):
    """[T, H d] -> [H, T, d]."""
    T = x.shape[0]
    if isinstance(x, ShareTensor):
        return x.reshape(T, H, -1).swapaxes(0, 1)
    return x.reshape(T, H, -1).transpose(1, 0, 2)


def _merge(x):
    """[H, T, d] -> [T, H d]."""
    H, T, d = x.shape
    if isinstance(x, ShareTensor):
        return x.swapaxes(0, 1).reshape(T, H * d)
    return x.transpose(1, 0, 2).reshape(T, H * d)


def share_weights(net: PartyNet, spec: ModelSpec) -> ShareTensor:
    with net.phase("input"):
        return share_float(net, spec.weights)


def full_decode_reference(q, K, V, scale: float = 1.0) -> np.ndarray:
    """softmax(q K^T * scale) V per head: q [H, d], K/V [H, n, d] -> [H, d]."""
    q = np.asarray(q, dtype=np.float64)
    logits = np.einsum("hd,hnd->hn", q, np.asarray(K)) * scale
    return np.einsum("hn,hnd->hd", plain_softmax(logits), np.asarray(V))


def reference_decode(spec: ModelSpec, prompt: np.ndarray, trace: DecodeTrace):
    """Dense plaintext model without any eviction: (prefill outputs, per-step outputs)."""
    H, scale = spec.H, spec.scale
    x = np.asarray(prompt, dtype=np.float64)
    T = x.shape[0]
    caches = []
    causal = np.triu(np.ones((T, T), dtype=bool), 1)
    for l in range(spec.L):
        Wq, Wk, Wv, Wo = spec.weights[l]
        q, k, v = _split(x @ Wq, H), _split(x @ Wk, H), _split(x @ Wv, H)
        logits = np.einsum("htd,hsd->hts", q, k) * scale
        logits = np.where(causal, -np.inf, logits)
        x = x + _merge(np.einsum("hts,hsd->htd", plain_softmax(logits), v)) @ Wo
        caches.append([k, v])
    prefill_out = x
    outs = []
    for e in range(trace.steps):
        x = trace.embeddings[e]
        for l in range(spec.L):
            Wq, Wk, Wv, Wo = spec.weights[l]
            q, k, v = (x @ Wq).reshape(H, -1), (x @ Wk).reshape(H, -1), (x @ Wv).reshape(H, -1)
            caches[l][0] = np.concatenate([caches[l][0], k[:, None]], axis=1)
            caches[l][1] = np.concatenate([caches[l][1], v[:, None]], axis=1)
            o = full_decode_reference(q, caches[l][0], caches[l][1], scale)
            x = x + o.reshape(-1) @ Wo
        outs.append(x)
    return prefill_out, np.stack(outs)


# -- prefill -----------------------------------------------------------------------

def prefill(prompt, spec: ModelSpec, config: EvictionConfig, mode: str = "plaintext", net: PartyNet | None = None):
    """Causal full attention over the prompt, static eviction and cache set-up.

    Returns (outputs [T, D], KVCacheState).  Static eviction runs on the
    softmaxed attention of the observation-window rows; sharing layers
    reuse the previous layer's retained set.
    """
    config.check()
    if mode not in ("plaintext", "secure"):
        raise ValueError(f"unknown mode {mode!r}")
    prompt = np.asarray(prompt, dtype=np.float64)
    T = prompt.shape[0]
    if T < 1:
        raise ValueError("empty prompt")
    if mode == "secure":
        if net is None:
            raise ValueError("secure mode needs a PartyNet")
        return _prefill_secure(net, prompt, spec, config)
    return _prefill_plain(prompt, spec, config)


def _prefill_plain(x, spec, config):
    H, scale, T = spec.H, spec.scale, x.shape[0]
    keep = default_keep(T, config)
    W = observation_rows(T, config.observation_window)
    causal = np.triu(np.ones((T, T), dtype=bool), 1)
    layers, retained_all = [], []
    retained = None
    for l in range(spec.L):
        Wq, Wk, Wv, Wo = spec.weights[l]
        q, k, v = _split(x @ Wq, H), _split(x @ Wk, H), _split(x @ Wv, H)
        logits = np.where(causal, -np.inf, np.einsum("htd,hsd->hts", q, k) * scale)
        attn = plain_softmax(logits)
        x = x + _merge(np.einsum("hts,hsd->htd", attn, v)) @ Wo
        if retained is None or layer_computes(l, config):
            scores = accumulate_attention_scores(attn[:, T - W :, :])
            retained = static_evict(scores, config.static_ratio, keep, per_head=config.per_head)
        retained_all.append(retained)
        Kr = np.take_along_axis(k, retained[..., None], axis=1)
        Vr = np.take_along_axis(v, retained[..., None], axis=1)
        layers.append(make_layer_cache(Kr, Vr, retained, config))
    return x, KVCacheState(layers, config, T, retained=retained_all)


def _prefill_secure(net, prompt, spec, config):
    H, T, d = spec.H, prompt.shape[0], spec.d
    weights = share_weights(net, spec)
    with net.phase("input"):
        x = share_float(net, prompt)
    keep = default_keep(T, config)
    W = observation_rows(T, config.observation_window)
    causal = ring.fx_encode(np.where(np.triu(np.ones((T, T), dtype=bool), 1), PAD_LOGIT, 0.0))
    layers, retained_all = [], []
    retained = None
    for l in range(spec.L):
        Wq, Wk, Wv, Wo = (weights[l, i] for i in range(4))
        with net.phase("linear"):
            q = mul_public(net, _split(sec_matmul(net, x, Wq), H), spec.scale)
            k = _split(sec_matmul(net, x, Wk), H)
            v = _split(sec_matmul(net, x, Wv), H)
        with net.phase("matmul"):
            logits = sec_matmul(net, q, k.T) + causal
        with net.phase("softmax"):
            attn = sec_softmax(net, logits)
        with net.phase("matmul"):
            o = sec_matmul(net, attn, v)
        with net.phase("linear"):
            x = x + sec_matmul(net, _merge(o), Wo)
        with net.phase("static"):
            if retained is None or layer_computes(l, config):
                scores = accumulate_attention_scores(attn[:, T - W :, :])
                retained = static_evict(scores, config.static_ratio, keep, net=net, per_head=config.per_head)
            if retained.selector is None:
                Kr, Vr = k, v
            else:
                Kr, Vr = gather_with_onehot(net, retained.selector, [k, v])
        retained_all.append(retained)
        with net.phase("summary"):
            layers.append(make_layer_cache(Kr, Vr, retained.positions, config, net))
    return x, KVCacheState(layers, config, T, weights=weights, retained=retained_all)


# -- decode ---------------------------------------------------------------------------

@dataclass
class StepInfo:
    selections: list = field(default_factory=list)  # per layer SelectionResult (None for full)
    # per layer number of attended rows; secure mode counts every gathered
    # row, padding included, since which selected rows are padding is secret
    attended: list = field(default_factory=list)


def decode_step(x, state: KVCacheState, spec: ModelSpec, config: EvictionConfig, mode: str = "plaintext",
                net: PartyNet | None = None, sparse: bool = True):
    """One decode step for input embedding ``x`` [D].

    Appends the new (k, v) to each layer's open buffer, selects clusters
    (or reuses the previous layer's selection), and attends over the
    selected rows plus the open buffer.  ``sparse=False`` attends over the
    whole retained cache instead.  Returns (output [D], state, StepInfo).
    """
    if state is None or not state.layers:
        raise ValueError("decode_step needs a state initialised by prefill")
    if mode == "secure":
        if net is None or not state.secure:
            raise ValueError("secure decoding needs a PartyNet and a secure state")
        out, info = _decode_secure(net, x, state, spec, config, sparse)
    elif mode == "plaintext":
        if state.secure:
            raise ValueError("plaintext decoding needs a plaintext state")
        out, info = _decode_plain(np.asarray(x, dtype=np.float64), state, spec, config, sparse)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    state.step += 1
    return out, state, info


def _decode_plain(x, state, spec, config, sparse):
    H = spec.H
    pos = state.prompt_len + state.step
    info = StepInfo()
    prev = None
    for l, lc in enumerate(state.layers):
        Wq, Wk, Wv, Wo = spec.weights[l]
        q = (x @ Wq).reshape(H, -1) * spec.scale
        k, v = (x @ Wk).reshape(H, -1), (x @ Wv).reshape(H, -1)
        append_token(lc, k, v, pos, config, close=False)
        if sparse:
            sel = apply_cross_layer_sharing(l, prev, config, lambda: hierarchical_select(q, lc, config, layer=l))
            rows = sel.token_rows(lc.valid)
            prev = sel
        else:
            sel = None
            rows = [np.flatnonzero(lc.valid)] * H
        o = np.empty((H, spec.d))
        for h in range(H):
            Kh = np.concatenate([lc.K[h, rows[h]], lc.open_K[h]])
            Vh = np.concatenate([lc.V[h, rows[h]], lc.open_V[h]])
            o[h] = full_decode_reference(q[h : h + 1], Kh[None], Vh[None])[0]
        info.attended.append(int(len(rows[0]) + lc.n_open))
        info.selections.append(sel)
        x = x + o.reshape(-1) @ Wo
        close_if_full(lc, config)
    return x, info


def _pad_bias(net, valid, H, frac):
    raw = ring.fx_encode(np.where(valid, 0.0, PAD_LOGIT), frac)
    return public(net, np.broadcast_to(raw, (H, valid.shape[0]))[..., None].copy(), frac)


def _decode_secure(net, x, state, spec, config, sparse):
    H, d = spec.H, spec.d
    pos = state.prompt_len + state.step
    weights = state.weights
    info = StepInfo()
    if not isinstance(x, ShareTensor):
        with net.phase("input"):
            x = share_float(net, np.asarray(x, dtype=np.float64))
    prev = None
    for l, lc in enumerate(state.layers):
        Wq, Wk, Wv, Wo = (weights[l, i] for i in range(4))
        with net.phase("linear"):
            xr = x.reshape(1, -1)
            q = mul_public(net, sec_matmul(net, xr, Wq).reshape(H, d), spec.scale)
            k = sec_matmul(net, xr, Wk).reshape(H, d)
            v = sec_matmul(net, xr, Wv).reshape(H, d)
        append_token(lc, k, v, pos, config, net, close=False)
        bias_closed = _pad_bias(net, lc.valid, H, lc.K.frac)
        if sparse:
            sel = apply_cross_layer_sharing(l, prev, config, lambda: hierarchical_select(q, lc, config, net, layer=l))
            s = sel.cluster_size
            if sel.secret:
                oh = selection_onehot(net, sel)
                with net.phase("gather"):
                    Ks, Vs, Bs = gather_with_onehot(net, oh, [lc.K, lc.V, bias_closed], s)
            else:
                rows = (np.asarray(sel.indices)[..., None] * s + np.arange(s)).reshape(H, -1)
                hi = np.arange(H)[:, None]
                Ks, Vs, Bs = lc.K[hi, rows], lc.V[hi, rows], bias_closed[hi, rows]
            prev = sel
        else:
            Ks, Vs, Bs = lc.K, lc.V, bias_closed
            sel = None
        Ka = concat([Ks, lc.open_K], axis=-2)
        Va = concat([Vs, lc.open_V], axis=-2)
        Ba = concat([Bs, public(net, np.zeros((H, lc.n_open, 1), np.uint64), Bs.frac)], axis=-2)
        with net.phase("matmul"):
            logits = sec_matmul(net, Ka, q.expand_dims(-1))[..., 0] + Ba[..., 0]
        with net.phase("softmax"):
            p = sec_softmax(net, logits)
        with net.phase("matmul"):
            o = sec_matmul(net, p.expand_dims(-2), Va)[..., 0, :]
        with net.phase("linear"):
            x = x + sec_matmul(net, o.reshape(1, -1), Wo).reshape(-1)
        info.selections.append(sel)
        info.attended.append(Ka.shape[-2])
        with net.phase("summary"):
            close_if_full(lc, config, net)
    return x, info


def synthetic_state(spec: ModelSpec, n: int, config: EvictionConfig, mode: str = "plaintext",
                    net: PartyNet | None = None, seed: int = 0) -> KVCacheState:
    """A retained cache of ``n`` random (k, v) rows per layer, skipping
    prefill.  Keys carry a slowly drifting component so that adjacent
    tokens are correlated, as clustering assumes."""
    config.check()
    rng = np.random.default_rng(seed)
    H, d = spec.H, spec.d
    layers = []
    weights = share_weights(net, spec) if mode == "secure" else None
    for _ in range(spec.L):
        drift = np.cumsum(rng.normal(scale=0.15, size=(H, n, d)), axis=1)
        K = drift + rng.normal(scale=0.5, size=(H, n, d))
        V = rng.normal(size=(H, n, d))
        pos = np.broadcast_to(np.arange(n), (H, n)).copy()
        if mode == "secure":
            with net.phase("input"):
                Ks, Vs = share_float(net, K), share_float(net, V)
            with net.phase("summary"):
                layers.append(make_layer_cache(Ks, Vs, pos, config, net))
        else:
            layers.append(make_layer_cache(K, V, pos, config))
    return KVCacheState(layers, config, n, weights=weights)


def run_decode(spec: ModelSpec, prompt, trace: DecodeTrace, config: EvictionConfig, mode: str = "plaintext",
               net: PartyNet | None = None, sparse: bool = True):
    """Prefill plus every trace step.  Returns (prefill outputs, step outputs
    [E, D] as floats, final state, list of StepInfo)."""
    pre, state = prefill(prompt, spec, config, mode, net)
    outs, infos = [], []
    for e in range(trace.steps):
        out, state, info = decode_step(trace.embeddings[e], state, spec, config, mode, net, sparse)
        outs.append(out)
        infos.append(info)
    if mode == "secure":
        with net.phase("reveal"):
            pre = reveal_float(net, pre)
            outs = [reveal_float(net, o) for o in outs]
    return pre, np.stack(outs), state, infos
