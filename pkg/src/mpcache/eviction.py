"""KV-cache eviction: look-once static eviction at prefill, cluster summaries,
the linearised similarity bound, hierarchical per-step selection and
cross-layer index sharing.

Every step has a plaintext (float) implementation and a secure one over
``ShareTensor`` values.  Both use the same physical cache layout so they
make the same decisions whenever scores are separated by more than the
fixed-point tolerance.

Cache layout
------------
The closed part of a layer's cache is stored in blocks of the coarsest
cluster size ``S``.  The retained prompt usually leaves a ragged last block;
it is padded with invalid rows (``valid`` mask, shared by all heads).  A
cluster's summary ignores padding by substituting the cluster's first row
for padded rows; a cluster made only of padding gets a zero summary and the
public score bias ``PAD_SCORE`` so that it is never preferred over a real
cluster.  Decoded tokens sit in an always-attended open buffer until ``S`` of
them have accumulated, then close into a new block.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ring
from .gather import gather_with_onehot, index_to_onehot, onehot_from_public, compact_by_mask
from .nonlinear import sec_max_value, sec_topk
from .rss import PartyNet, ShareTensor, concat, mul_public, public, sec_matmul, sec_mul, stack

PAD_SCORE = -float(1 << 16)
PAD_LOGIT = -256.0


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class EvictionConfig:
    """Eviction hyperparameters.

    ``levels`` lists (cluster size, keep ratio) from coarse to fine.  Level j
    keeps ceil(ratio_j * C_j) clusters, C_j being the number of level-j
    clusters in the cache; the last ratio is the final selection ratio.
    ``always_keep`` is ``"window"`` (the observation-window rows), ``"none"``
    or a count of trailing prompt tokens.
    """

    static_ratio: float = 0.0
    observation_window: float = 0.2
    levels: tuple = ((32, 0.5), (16, 0.4))
    alpha: float = 0.6
    share_group: int = 2
    share_skip_layers: int = 2
    always_keep: object = "window"
    per_head: bool = True

    def __post_init__(self):
        self.levels = tuple((int(s), float(r)) for s, r in self.levels)

    @property
    def final_ratio(self) -> float:
        return self.levels[-1][1]

    @property
    def cluster_sizes(self) -> list[int]:
        return [s for s, _ in self.levels]

    @property
    def block_size(self) -> int:
        return self.levels[0][0]

    def validate(self) -> list[str]:
        errs = []
        if not 0.0 <= self.static_ratio <= 1.0:
            errs.append(f"static_ratio must be in [0, 1], got {self.static_ratio}")
        if not 0.0 < self.observation_window <= 1.0:
            errs.append(f"observation_window must be in (0, 1], got {self.observation_window}")
        if not self.levels:
            errs.append("levels must not be empty")
        prev = None
        for s, r in self.levels:
            if s < 1:
                errs.append(f"cluster size must be positive, got {s}")
            if not 0.0 < r <= 1.0:
                errs.append(f"keep ratio must be in (0, 1], got {r}")
            if prev is not None and (s >= prev or prev % max(s, 1)):
                errs.append(f"cluster size {s} must be smaller than and divide {prev}")
            prev = s
        if not 0.0 <= self.alpha <= 1.0:
            errs.append(f"alpha must be in [0, 1], got {self.alpha}")
        if self.share_group < 1:
            errs.append(f"share_group must be >= 1, got {self.share_group}")
        if self.share_skip_layers < 0:
            errs.append(f"share_skip_layers must be >= 0, got {self.share_skip_layers}")
        ak = self.always_keep
        if not (ak in ("window", "none") or (isinstance(ak, int) and not isinstance(ak, bool) and ak >= 0)):
            errs.append(f"always_keep must be 'window', 'none' or a non-negative count, got {ak!r}")
        return errs

    def check(self) -> "EvictionConfig":
        errs = self.validate()
        if errs:
            raise ConfigError(errs)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["levels"] = [list(lv) for lv in self.levels]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvictionConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"unknown eviction field {k!r}" for k in unknown])
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "EvictionConfig":
        return cls.from_dict(json.loads(text))

    # named presets -----------------------------------------------------------
    @classmethod
    def preset(cls, name: str, final_ratio: float = 0.4, **overrides) -> "EvictionConfig":
        """``longbench``: clusters 32 -> 16; ``xsum``: 8 -> 4; ``none``: no eviction.

        For the two-level presets the first level drops half of the clusters
        when the final ratio is below 0.5 and keeps all of them otherwise.
        """
        if name == "none":
            base = dict(static_ratio=0.0, levels=((1, 1.0),))
        elif name in ("longbench", "xsum"):
            coarse, fine = (32, 16) if name == "longbench" else (8, 4)
            first = 0.5 if final_ratio < 0.5 else 1.0
            base = dict(levels=((coarse, first), (fine, final_ratio)))
        else:
            raise ConfigError([f"unknown preset {name!r}"])
        base.update(overrides)
        return cls(**base)


# -- static eviction -------------------------------------------------------------

def observation_rows(T: int, ratio: float) -> int:
    """Number of trailing prompt rows used for scoring (at least one)."""
    return max(1, math.ceil(ratio * T - 1e-9))


def static_budget(T: int, static_ratio: float) -> int:
    return math.ceil((1.0 - static_ratio) * T - 1e-9)


def default_keep(T: int, config: EvictionConfig) -> np.ndarray:
    ak = config.always_keep
    if ak == "none":
        return np.zeros(0, dtype=np.int64)
    n = observation_rows(T, config.observation_window) if ak == "window" else min(int(ak), T)
    return np.arange(T - n, T, dtype=np.int64)


def accumulate_attention_scores(attn_window):
    """[H, W, T] trailing attention rows -> [H, T] column sums."""
    if isinstance(attn_window, ShareTensor):
        return attn_window.sum(axis=1)
    a = np.asarray(attn_window, dtype=np.float64)
    if a.ndim != 3:
        raise ValueError("attention window must be [H, W, T]")
    return a.sum(axis=1)


def _retained_count(T: int, static_ratio: float, keep) -> int:
    return max(static_budget(T, static_ratio), len(keep))


def static_evict(scores, static_ratio: float, always_keep=(), net: PartyNet | None = None, per_head: bool = True):
    """Retain the highest-scoring prompt tokens per head.

    ``always_keep`` tokens are forced in; the remaining budget
    ceil((1 - static_ratio) T) - |always_keep| goes to the best other tokens
    (ties to the lowest position).  The retained count is the same for every
    head.  Plaintext scores [H, T] give sorted positions [H, R]; secret
    scores give a ``SecureRetained`` (requires ``net``).
    """
    keep = np.unique(np.asarray(always_keep, dtype=np.int64))
    T = scores.shape[-1]
    if keep.size and (keep[0] < 0 or keep[-1] >= T):
        raise ValueError("always_keep positions outside the prompt")
    count = _retained_count(T, static_ratio, keep)
    others = np.setdiff1d(np.arange(T), keep)
    fill = count - keep.size
    if isinstance(scores, ShareTensor):
        if net is None:
            raise ValueError("secure static eviction needs a PartyNet")
        return _static_evict_secure(net, scores, keep, others, fill, count, per_head)
    s = np.asarray(scores, dtype=np.float64)
    if not per_head:
        s = s.sum(axis=0, keepdims=True)
    out = []
    for row in s:
        sub = row[others]
        order = np.lexsort((others, -sub))[:fill]
        out.append(np.sort(np.concatenate([keep, others[order]])))
    res = np.stack(out).astype(np.int64)
    if not per_head:
        res = np.repeat(res, scores.shape[0], axis=0)
    return res


@dataclass
class SecureRetained:
    """Outcome of secure static eviction: retained positions [H, R] (sorted)
    and the integer selection matrix [H, R, T] used to compact K and V.
    When nothing is evicted the positions are public and ``selector`` is None."""

    positions: ShareTensor
    selector: ShareTensor
    count: int


def _static_evict_secure(net, scores, keep, others, fill, count, per_head):
    H, T = scores.shape
    if count == T:
        pos = np.broadcast_to(np.arange(T), (H, T)).copy()
        return SecureRetained(pos, None, count)
    with _with_phase(net, "static"):
        s = scores if per_head else scores.sum(axis=0, keepdims=True)
        rows = s.shape[0]
        base = public(net, np.zeros((rows, T), np.uint64), 0)
        mask = ShareTensor(base.pairs.copy(), 0)
        if keep.size:
            mask = mask + _onehot_row(T, keep, rows)
        if 0 < fill < others.size:
            _, picked = sec_topk(net, s[:, others], fill, return_mask=True)
            mask_pairs = mask.pairs.copy()
            mask_pairs[..., others] += picked.pairs
            mask = ShareTensor(mask_pairs, 0)
        elif fill == others.size and fill:
            mask = mask + _onehot_row(T, others, rows)
        if not per_head:
            mask = mask.broadcast_to((H, T))
        _, pos, sel = compact_by_mask(net, mask, count, [])
    return SecureRetained(pos, sel, count)


class _nullctx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def _onehot_row(T, idx, rows):
    row = np.zeros(T, dtype=np.uint64)
    row[idx] = 1
    return np.broadcast_to(row, (rows, T))


# -- similarity ----------------------------------------------------------------------

@dataclass
class ClusterSummary:
    r_max: np.ndarray
    r_min: np.ndarray
    token_span: tuple


def summarize_cluster(K_c, start: int = 0) -> ClusterSummary:
    K_c = np.asarray(K_c, dtype=np.float64)
    if K_c.shape[0] == 0:
        raise ValueError("empty cluster")
    return ClusterSummary(K_c.max(axis=0), K_c.min(axis=0), (start, start + K_c.shape[0]))


def sim_exact_max(q, K_c) -> float:
    """max_k q . k over the cluster (reference only)."""
    K_c = np.asarray(K_c, dtype=np.float64)
    if K_c.shape[0] == 0:
        raise ValueError("empty cluster")
    return float(np.max(K_c @ np.asarray(q, dtype=np.float64)))


def sim_upper_bound(q, summary: ClusterSummary) -> float:
    """sum_i max(q_i r_max_i, q_i r_min_i), an upper bound on ``sim_exact_max``."""
    q = np.asarray(q, dtype=np.float64)
    return float(np.sum(np.maximum(q * summary.r_max, q * summary.r_min)))


def blend(summary_max, summary_min, alpha: float):
    """alpha r_max + (1 - alpha) r_min, written as r_min + alpha (r_max - r_min)
    so that singleton clusters (r_max == r_min) reproduce the key exactly."""
    lo = np.asarray(summary_min)
    return lo + alpha * (np.asarray(summary_max) - lo)


def sim_linear(q, summary: ClusterSummary, alpha: float) -> float:
    """q . (alpha r_max + (1 - alpha) r_min): one inner product per cluster
    once the blended vector is cached."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return float(np.dot(np.asarray(q, dtype=np.float64), blend(summary.r_max, summary.r_min, alpha)))


# -- summaries over the padded layout --------------------------------------------------

@dataclass
class LevelSummary:
    """Per-level summaries for all clusters of a layer: arrays [H, C, d]."""

    size: int
    r_max: object
    r_min: object
    blend: object
    pad: np.ndarray  # [C] True for clusters made only of padding

    @property
    def n_clusters(self) -> int:
        return int(self.pad.shape[0])

    @property
    def bias(self) -> np.ndarray:
        return np.where(self.pad, PAD_SCORE, 0.0)

    def cluster(self, h: int, c: int, valid: np.ndarray | None = None) -> ClusterSummary:
        start = c * self.size
        end = start + self.size
        if valid is not None:
            end = start + int(np.asarray(valid[start:end]).sum())
        return ClusterSummary(np.asarray(self.r_max)[h, c], np.asarray(self.r_min)[h, c], (start, end))


def _first_row_fill(x, valid: np.ndarray, s: int):
    """[..., n, d] -> [..., n/s, s, d] with padded rows replaced by their
    cluster's first row and fully padded clusters zeroed."""
    n = valid.shape[0]
    v = valid.reshape(n // s, s)
    full_pad = ~v[:, 0]
    if isinstance(x, ShareTensor):
        p = x.pairs.reshape(x.pairs.shape[:-2] + (n // s, s, x.shape[-1]))
        p = np.where(v[..., None], p, p[..., :, :1, :])
        p = np.where(full_pad[:, None, None], np.uint64(0), p).astype(ring.RING_DTYPE)
        return ShareTensor(p, x.frac), full_pad
    a = np.asarray(x, dtype=np.float64)
    a = a.reshape(a.shape[:-2] + (n // s, s, a.shape[-1]))
    a = np.where(v[..., None], a, a[..., :, :1, :])
    a = np.where(full_pad[:, None, None], 0.0, a)
    return a, full_pad


def _reduce_maxmin(net, hi, lo):
    """Coordinate-wise max of ``hi`` and min of ``lo`` over axis -2 ([..., C, s, d])."""
    if isinstance(hi, ShareTensor):
        both = stack([hi, -lo], axis=0).swapaxes(-1, -2)  # [2, ..., C, d, s]
        red = sec_max_value(net, both)
        return red[0], -red[1]
    return hi.max(axis=-2), lo.min(axis=-2)


def _blend(net, r_max, r_min, alpha):
    if isinstance(r_max, ShareTensor):
        if alpha == 1.0:
            return r_max
        if alpha == 0.0:
            return r_min
        return r_min + mul_public(net, r_max - r_min, alpha)
    return blend(r_max, r_min, alpha)


def build_summaries(K, sizes, valid=None, alpha: float = 0.6, net: PartyNet | None = None) -> list[LevelSummary]:
    """Per-level summaries of retained keys ``K`` ([n, d] or [H, n, d]).

    Levels are coarse -> fine; finer sizes must divide coarser ones.  The
    finest level is computed from the keys, each coarser level from its
    children.  Plaintext keys whose length is not a multiple of the coarsest
    size are padded (a short cache becomes one ragged cluster).
    """
    sizes = [int(s) for s in sizes]
    for a, b in zip(sizes, sizes[1:]):
        if b >= a or a % b:
            raise ValueError(f"cluster sizes must strictly decrease and divide: {sizes}")
    secure = isinstance(K, ShareTensor)
    if not secure:
        K = np.asarray(K, dtype=np.float64)
    squeeze = K.ndim == 2
    if squeeze:
        K = K[None] if not secure else K.expand_dims(0)
    n = K.shape[-2]
    S = sizes[0]
    if valid is None:
        if secure:
            valid = np.ones(n, dtype=bool)
        else:
            P = max(1, math.ceil(n / S)) * S
            valid = np.arange(P) < n
            K = np.concatenate([K, np.zeros(K.shape[:-2] + (P - n, K.shape[-1]))], axis=-2)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape[0] != K.shape[-2] or valid.shape[0] % S:
        raise ValueError("validity mask must cover the padded cache, a multiple of the block size")
    if secure and net is None:
        raise ValueError("secure summaries need a PartyNet")
    ctx = net.phase("summary") if secure and net.phase_name == "default" else _nullctx()
    out = []
    with ctx:
        fine = sizes[-1]
        grouped, pad = _first_row_fill(K, valid, fine)
        r_max, r_min = _reduce_maxmin(net, grouped, grouped)
        levels = [(fine, r_max, r_min, pad)]
        for s in reversed(sizes[:-1]):
            child_s, c_max, c_min, c_pad = levels[-1]
            r = s // child_s
            cvalid = ~c_pad
            g_max, pad = _first_row_fill(c_max, cvalid, r)
            g_min, _ = _first_row_fill(c_min, cvalid, r)
            r_max, r_min = _reduce_maxmin(net, g_max, g_min)
            levels.append((s, r_max, r_min, pad))
        for s, r_max, r_min, pad in reversed(levels):
            b = _blend(net, r_max, r_min, alpha)
            if squeeze:
                r_max, r_min, b = r_max[0], r_min[0], b[0]
            out.append(LevelSummary(s, r_max, r_min, b, pad))
    return out


def concat_summaries(a: list[LevelSummary], b: list[LevelSummary]) -> list[LevelSummary]:
    out = []
    for x, y in zip(a, b):
        if isinstance(x.r_max, ShareTensor):
            cat = lambda u, v: concat([u, v], axis=-2)  # noqa: E731
        else:
            cat = lambda u, v: np.concatenate([u, v], axis=-2)  # noqa: E731
        out.append(LevelSummary(x.size, cat(x.r_max, y.r_max), cat(x.r_min, y.r_min), cat(x.blend, y.blend), np.concatenate([x.pad, y.pad])))
    return out


# -- cache state --------------------------------------------------------------------

@dataclass
class LayerCache:
    """One layer's cache: closed padded blocks plus the open buffer.

    ``positions`` holds original token positions of closed rows ([H, P];
    plaintext ints with -1 for padding, or secret indices).
    """

    K: object
    V: object
    valid: np.ndarray
    positions: object
    summaries: list
    open_K: object
    open_V: object
    open_positions: list = field(default_factory=list)

    @property
    def secure(self) -> bool:
        return isinstance(self.K, ShareTensor)

    @property
    def n_open(self) -> int:
        return self.open_K.shape[-2]

    @property
    def retained_count(self) -> int:
        return int(self.valid.sum()) + self.n_open

    def all_keys(self):
        """Valid closed rows followed by the open buffer ([H, R, d])."""
        idx = np.flatnonzero(self.valid)
        if self.secure:
            return concat([self.K[:, idx], self.open_K], axis=-2), concat([self.V[:, idx], self.open_V], axis=-2)
        return (
            np.concatenate([self.K[:, idx], self.open_K], axis=-2),
            np.concatenate([self.V[:, idx], self.open_V], axis=-2),
        )


@dataclass
class KVCacheState:
    layers: list
    config: EvictionConfig
    prompt_len: int
    step: int = 0
    weights: object = None  # secret-shared projections (secure mode)
    retained: list = field(default_factory=list)  # per-layer static outcome

    @property
    def secure(self) -> bool:
        return self.layers[0].secure

    @property
    def retained_count(self) -> int:
        counts = {lc.retained_count for lc in self.layers}
        if len(counts) != 1:
            raise AssertionError(f"layers disagree on retained count: {counts}")
        return counts.pop()


def pad_layout(n: int, S: int) -> np.ndarray:
    """Validity mask for n retained rows laid out in blocks of S."""
    P = max(1, math.ceil(n / S)) * S
    return np.arange(P) < n


def make_layer_cache(K, V, positions, config: EvictionConfig, net: PartyNet | None = None) -> LayerCache:
    """Lay out retained rows [H, n, d] in padded blocks and build summaries."""
    S = config.block_size
    n = K.shape[-2]
    valid = pad_layout(n, S)
    extra = valid.shape[0] - n
    H, d = K.shape[0], K.shape[-1]
    if isinstance(K, ShareTensor):
        zeros = public(net, np.zeros((H, extra, d), np.uint64), K.frac)
        Kp = concat([K, zeros], axis=-2)
        Vp = concat([V, zeros], axis=-2)
        if isinstance(positions, ShareTensor):
            pos = concat([positions, public(net, np.zeros((H, extra), np.uint64), 0)], axis=-1)
            pos.width = positions.width
        else:
            pos = np.concatenate([np.asarray(positions), -np.ones((H, extra), np.int64)], axis=-1)
        open_K = public(net, np.zeros((H, 0, d), np.uint64), K.frac)
        open_V = public(net, np.zeros((H, 0, d), np.uint64), V.frac)
    else:
        Kp = np.concatenate([K, np.zeros((H, extra, d))], axis=-2)
        Vp = np.concatenate([V, np.zeros((H, extra, d))], axis=-2)
        pos = np.concatenate([np.asarray(positions, dtype=np.int64), -np.ones((H, extra), np.int64)], axis=-1)
        open_K = np.zeros((H, 0, d))
        open_V = np.zeros((H, 0, d))
    summaries = build_summaries(Kp, config.cluster_sizes, valid, config.alpha, net)
    return LayerCache(Kp, Vp, valid, pos, summaries, open_K, open_V, [])


def append_token(lc: LayerCache, k, v, position: int, config: EvictionConfig, net: PartyNet | None = None, close: bool = True) -> None:
    """Add a decoded (k, v) [H, d] to the open buffer and, with ``close``,
    seal the buffer once it is full."""
    if lc.secure:
        lc.open_K = concat([lc.open_K, k.expand_dims(-2)], axis=-2)
        lc.open_V = concat([lc.open_V, v.expand_dims(-2)], axis=-2)
    else:
        lc.open_K = np.concatenate([lc.open_K, np.asarray(k)[:, None]], axis=-2)
        lc.open_V = np.concatenate([lc.open_V, np.asarray(v)[:, None]], axis=-2)
    lc.open_positions.append(position)
    if close:
        close_if_full(lc, config, net)


def close_if_full(lc: LayerCache, config: EvictionConfig, net: PartyNet | None = None) -> None:
    """Turn a full open buffer into a new closed block, summarising only
    that block."""
    S = config.block_size
    if lc.n_open < S:
        return
    valid_block = np.ones(S, dtype=bool)
    new_sum = build_summaries(lc.open_K, config.cluster_sizes, valid_block, config.alpha, net)
    H = lc.K.shape[0]
    block_pos = np.broadcast_to(np.asarray(lc.open_positions, dtype=np.int64), (H, S))
    if lc.secure:
        lc.K = concat([lc.K, lc.open_K], axis=-2)
        lc.V = concat([lc.V, lc.open_V], axis=-2)
        if isinstance(lc.positions, ShareTensor):
            w = lc.positions.width
            lc.positions = concat([lc.positions, public(net, block_pos.astype(np.uint64), 0)], axis=-1)
            lc.positions.width = w
        else:
            lc.positions = np.concatenate([lc.positions, block_pos], axis=-1)
        lc.open_K = lc.open_K[:, :0]
        lc.open_V = lc.open_V[:, :0]
    else:
        lc.K = np.concatenate([lc.K, lc.open_K], axis=-2)
        lc.V = np.concatenate([lc.V, lc.open_V], axis=-2)
        lc.positions = np.concatenate([lc.positions, block_pos], axis=-1)
        lc.open_K = lc.open_K[:, :0]
        lc.open_V = lc.open_V[:, :0]
    lc.valid = np.concatenate([lc.valid, valid_block])
    lc.summaries = concat_summaries(lc.summaries, new_sum)
    lc.open_positions = []


# -- hierarchical selection -------------------------------------------------------------

@dataclass
class SelectionResult:
    """Selected finest-level clusters per head.

    ``indices`` is [H, k] (ints in plaintext mode; a ShareTensor, or public
    ints when the whole candidate set was taken, in secure mode).
    ``onehot`` caches the secure gather rows so that a layer reusing this
    selection does not repeat the equality tests.
    """

    indices: object
    cluster_size: int
    n_clusters: int
    levels: list = field(default_factory=list)
    onehot: object = None
    shared_from: int | None = None
    layer: int | None = None

    @property
    def k(self) -> int:
        return self.indices.shape[-1]

    @property
    def secret(self) -> bool:
        return isinstance(self.indices, ShareTensor)

    def token_rows(self, valid: np.ndarray) -> list[np.ndarray]:
        """Plaintext: closed-cache row numbers of the selected tokens per head."""
        if self.secret:
            raise TypeError("token rows of a secret selection are not public")
        s = self.cluster_size
        out = []
        for row in np.asarray(self.indices):
            rows = (np.sort(row)[:, None] * s + np.arange(s)).ravel()
            out.append(rows[valid[rows]])
        return out


def level_budget(ratio: float, n_clusters: int, n_candidates: int) -> int:
    return max(1, min(math.ceil(ratio * n_clusters - 1e-9), n_candidates))


def _sim_plain(blend_sel, q):
    return np.einsum("hcd,hd->hc", blend_sel, q)


def hierarchical_select(q, cache, config: EvictionConfig, net: PartyNet | None = None, layer: int = 0) -> SelectionResult:
    """Coarse-to-fine cluster selection for one layer.

    ``cache`` is a ``LayerCache`` (or a ``KVCacheState`` plus ``layer``).
    Level 1 scores every block with the linearised bound and keeps the top
    ceil(ratio_1 * C_1); each further level scores only the children of the
    survivors.  Plaintext queries [H, d] run in float, secret ones run the
    secure protocols (ledger phases ``similarity``, ``topk``, ``gather``).
    """
    if isinstance(cache, KVCacheState):
        cache = cache.layers[layer]
    if not cache.summaries:
        raise ValueError("cache has no summaries")
    if isinstance(q, ShareTensor):
        if net is None:
            raise ValueError("secure selection needs a PartyNet")
        return _select_secure(net, q, cache, config, layer)
    return _select_plain(np.asarray(q, dtype=np.float64), cache, config, layer)


def _select_plain(q, cache: LayerCache, config: EvictionConfig, layer: int) -> SelectionResult:
    H = q.shape[0]
    sums = cache.summaries
    trace = []
    winners = None
    for j, (s, ratio) in enumerate(config.levels):
        lv = sums[j]
        C = lv.n_clusters
        if j == 0:
            cand = np.broadcast_to(np.arange(C), (H, C))
        else:
            r = config.levels[j - 1][0] // s
            parents = np.sort(winners, axis=-1)
            cand = (parents[..., None] * r + np.arange(r)).reshape(parents.shape[0], -1)
            cand = np.broadcast_to(cand, (H, cand.shape[-1]))
        k = level_budget(ratio, int((~lv.pad).sum()), cand.shape[-1])
        if k == cand.shape[-1]:
            winners = np.array(cand)
        else:
            bl = np.take_along_axis(np.asarray(lv.blend), cand[..., None], axis=1)
            scores = _sim_plain(bl, q) + lv.bias[cand]
            if not config.per_head:
                scores = scores.sum(axis=0, keepdims=True)
                cand = cand[:1]
            order = np.argsort(-scores, axis=-1, kind="stable")[:, :k]
            winners = np.take_along_axis(cand, order, axis=-1)
            winners = np.broadcast_to(winners, (H, k)).copy()
        trace.append(winners)
    last = config.levels[-1][0]
    return SelectionResult(winners, last, sums[-1].n_clusters, trace, layer=layer)


def _with_phase(net, name):
    return net.phase(name) if net.phase_name == "default" else _nullctx()


def _select_secure(net: PartyNet, q: ShareTensor, cache: LayerCache, config: EvictionConfig, layer: int) -> SelectionResult:
    H = q.shape[0]
    sums = cache.summaries
    trace = []
    winners = None  # np.ndarray (public) or ShareTensor [H or 1, k]
    for j, (s, ratio) in enumerate(config.levels):
        lv = sums[j]
        C = lv.n_clusters
        bias = public(net, ring.fx_encode(np.broadcast_to(lv.bias, (H, C)), q.frac), q.frac)
        if j == 0:
            cand_ids = np.broadcast_to(np.arange(C), (H, C))
            cand_blend, cand_bias = lv.blend, bias
        else:
            r = config.levels[j - 1][0] // s
            parent_C = sums[j - 1].n_clusters
            if isinstance(winners, ShareTensor):
                with _with_phase(net, "gather"):
                    oh = index_to_onehot(net, winners, parent_C)
                    cand_blend, cb = gather_with_onehot(net, oh, [lv.blend, bias.expand_dims(-1)], r)
                cand_bias = cb[..., 0]
                cand_ids = winners.scale_int(r).expand_dims(-1) + ring.as_ring(np.arange(r))
                cand_ids = cand_ids.reshape(cand_ids.shape[:-2] + (-1,))
                cand_ids.width = ring.bit_width(C)
            else:
                par = np.asarray(winners)
                cand_ids = (par[..., None] * r + np.arange(r)).reshape(par.shape[0], -1)
                cand_ids = np.broadcast_to(cand_ids, (H, cand_ids.shape[-1]))
                cand_blend = lv.blend[np.arange(H)[:, None], cand_ids]
                cand_bias = bias[np.arange(H)[:, None], cand_ids]
        n_cand = cand_ids.shape[-1]
        k = level_budget(ratio, int((~lv.pad).sum()), n_cand)
        if k == n_cand:
            winners = cand_ids if isinstance(cand_ids, ShareTensor) else np.array(cand_ids)
        else:
            with _with_phase(net, "similarity"):
                scores = sec_matmul(net, cand_blend, q.expand_dims(-1))[..., 0] + cand_bias
            if not config.per_head:
                scores = scores.sum(axis=0, keepdims=True)
            with _with_phase(net, "topk"):
                _, onehot = sec_topk(net, scores, k, return_onehot=True)
                if isinstance(cand_ids, ShareTensor):
                    ids = cand_ids if config.per_head else cand_ids[:1]
                    winners = sec_mul(net, onehot, ids.expand_dims(-2)).sum(axis=-1)
                else:
                    ids = cand_ids if config.per_head else cand_ids[:1]
                    winners = onehot.scale_int(ids[..., None, :].astype(np.int64)).sum(axis=-1)
                winners.width = ring.bit_width(C)
            if not config.per_head:
                winners = winners.broadcast_to((H, k))
                winners.width = ring.bit_width(C)
        trace.append(winners)
    last = config.levels[-1][0]
    return SelectionResult(winners, last, sums[-1].n_clusters, trace, layer=layer)


def selection_onehot(net: PartyNet, sel: SelectionResult) -> ShareTensor:
    """Integer gather rows [H, k, C] for a selection (cached on ``sel``)."""
    if sel.onehot is None:
        if sel.secret:
            with _with_phase(net, "gather"):
                sel.onehot = index_to_onehot(net, sel.indices, sel.n_clusters)
        else:
            sel.onehot = onehot_from_public(net, sel.indices, sel.n_clusters)
    return sel.onehot


# -- cross-layer sharing -----------------------------------------------------------------

def layer_computes(layer: int, config: EvictionConfig) -> bool:
    """True when ``layer`` selects afresh, False when it reuses layer - 1."""
    skip, group = config.share_skip_layers, config.share_group
    if group <= 1 or layer < skip:
        return True
    return (layer - skip) % group == 0


def apply_cross_layer_sharing(layer: int, previous: SelectionResult | None, config: EvictionConfig, compute):
    """Reuse ``previous`` for sharing layers, otherwise call ``compute()``.

    Reused selections stay secret and cost nothing here; the returned object
    records which layer produced it.
    """
    if layer_computes(layer, config) or previous is None:
        res = compute()
        res.layer = layer
        return res
    src = previous.shared_from if previous.shared_from is not None else previous.layer
    return SelectionResult(
        previous.indices,
        previous.cluster_size,
        previous.n_clusters,
        previous.levels,
        previous.onehot,
        shared_from=src,
        layer=layer,
    )


# -- commonality --------------------------------------------------------------------------

def commonality_score(idx_sets, m: int) -> float:
    """(1 / (k (L - m))) * sum over l of |idx_l ∩ ... ∩ idx_{l+m}|.

    ``idx_sets`` holds one size-k index collection per layer.
    """
    sets = [set(int(i) for i in s) for s in idx_sets]
    L = len(sets)
    if m < 1 or L <= m:
        raise ValueError(f"need L > m >= 1, got L={L}, m={m}")
    sizes = {len(s) for s in sets}
    if len(sizes) != 1:
        raise ValueError("all layers must contribute the same number of indices")
    k = sizes.pop()
    if k == 0:
        raise ValueError("empty index sets")
    total = 0
    for l in range(L - m):
        common = set.intersection(*sets[l : l + m + 1])
        total += len(common)
    return total / (k * (L - m))


def selection_trace_csv(rows) -> str:
    """rows of (step, layer, head, indices) -> CSV text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "layer", "head", "indices"])
    for step, layer, head, idx in rows:
        w.writerow([step, layer, head, " ".join(str(int(i)) for i in idx)])
    return buf.getvalue()


def read_selection_trace(text: str) -> dict:
    """CSV text -> {(step, head): {layer: indices}}; raises ValueError when malformed."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != ["step", "layer", "head", "indices"]:
        raise ValueError(f"bad selection trace header: {header}")
    out: dict = {}
    for lineno, row in enumerate(reader, start=2):
        if len(row) != 4:
            raise ValueError(f"line {lineno}: expected 4 fields, got {len(row)}")
        try:
            step, layer, head = int(row[0]), int(row[1]), int(row[2])
            idx = [int(t) for t in row[3].split()]
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from exc
        out.setdefault((step, head), {})[layer] = idx
    return out


# -- planted-relevance traces ----------------------------------------------------------------

@dataclass
class PlantedTrace:
    """Synthetic single-layer trace where a known token set dominates.

    ``relevant[e]`` are the prompt positions that matter at decode step e.
    """

    prompt_keys: np.ndarray  # [H, T, d]
    prompt_queries: np.ndarray  # [H, T, d]
    decode_queries: np.ndarray  # [E, H, d]
    decode_keys: np.ndarray  # [E, H, d]
    relevant: list

    @property
    def prompt_len(self) -> int:
        return self.prompt_keys.shape[1]


def planted_trace(T=256, H=2, d=16, E=4, spans=((40, 16), (160, 16)), margin=10.0, seed=0) -> PlantedTrace:
    """Keys in the planted spans align with a per-head direction u that every
    decode query (and the observation-window queries) points along, so their
    scores beat all others by at least ``margin`` times."""
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(H, d))
    u /= np.linalg.norm(u, axis=-1, keepdims=True)
    noise = 0.05
    K = rng.normal(size=(H, T, d)) * noise
    K -= np.einsum("htd,hd->ht", K, u)[..., None] * u[:, None, :]  # background orthogonal to u
    rel = np.concatenate([np.arange(a, a + n) for a, n in spans]).astype(np.int64)
    K[:, rel] += margin * u[:, None, :]
    Q = rng.normal(size=(H, T, d)) * noise + u[:, None, :]
    q = rng.normal(size=(E, H, d)) * noise + u[None]
    dk = rng.normal(size=(E, H, d)) * noise
    dk -= np.einsum("ehd,hd->eh", dk, u)[..., None] * u[None]
    return PlantedTrace(K, Q, q, dk, [rel.copy() for _ in range(E)])


def covering_ratio(trace: PlantedTrace, config: EvictionConfig) -> float:
    """Smallest final ratio whose budget covers every fine cluster touched
    by a planted token (assumes no static eviction of planted tokens)."""
    s = config.levels[-1][0]
    T = trace.prompt_len
    n_fine = -(-T // s)
    touched = max(len({int(t) // s for t in rel}) for rel in trace.relevant)
    return touched / n_fine


def eval_selection_recall(trace: PlantedTrace, config: EvictionConfig) -> float:
    """Fraction of planted tokens that survive static eviction and get
    selected at each decode step, averaged over steps (plaintext)."""
    config.check()
    if not trace.relevant or any(len(r) == 0 for r in trace.relevant):
        raise ValueError("trace declares an empty ground-truth set")
    H, T, d = trace.prompt_keys.shape
    keep = default_keep(T, config)
    W = observation_rows(T, config.observation_window)
    logits = np.einsum("hqd,hkd->hqk", trace.prompt_queries[:, T - W :], trace.prompt_keys) / math.sqrt(d)
    causal = np.arange(T)[None, :] > np.arange(T - W, T)[:, None]
    logits = np.where(causal[None], -np.inf, logits)
    logits -= logits.max(axis=-1, keepdims=True)
    attn = np.exp(logits)
    attn /= attn.sum(axis=-1, keepdims=True)
    retained = static_evict(accumulate_attention_scores(attn), config.static_ratio, keep, per_head=config.per_head)
    Kr = np.take_along_axis(trace.prompt_keys, retained[..., None], axis=1)
    lc = make_layer_cache(Kr, Kr, retained, config)
    recalls = []
    for e, rel in enumerate(trace.relevant):
        sel = hierarchical_select(trace.decode_queries[e], lc, config)
        hits = []
        for h, rows in enumerate(sel.token_rows(lc.valid)):
            chosen = set(lc.positions[h, rows].tolist()) | set(lc.open_positions)
            hits.append(len(chosen & set(int(t) for t in rel)) / len(rel))
        recalls.append(float(np.mean(hits)))
        append_token(lc, trace.decode_keys[e], trace.decode_keys[e], T + e, config)
    return float(np.mean(recalls))
