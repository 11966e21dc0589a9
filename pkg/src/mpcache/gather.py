"""Oblivious row gathering: secret indices -> secret one-hot rows -> matmul.

Gathering can run at token granularity (one equality per cached token and
index) or cluster granularity, where the cache is viewed as blocks of ``s``
consecutive rows and each index addresses a whole block.  One-hot entries are
integer 0/1 shares, so the gather product is exact (no truncation).
"""

from __future__ import annotations

import numpy as np

from . import ring
from .nonlinear import _auto_phase, b2a, sec_equal
from .rss import PartyNet, ShareTensor, concat, peek, public, sec_matmul, sec_mul, stack


def _as_index_tensor(ids) -> ShareTensor:
    if isinstance(ids, ShareTensor):
        return ids
    ids = list(ids)
    if not ids:
        raise ValueError("empty index list")
    widths = {i.width for i in ids}
    out = stack(ids, axis=-1)
    out.width = max(w for w in widths if w is not None) if widths != {None} else None
    return out


def index_to_onehot(net: PartyNet, idx: ShareTensor, n: int, debug: bool = False) -> ShareTensor:
    """Integer one-hot rows [..., n] for secret indices of shape [...].

    Runs n equality tests per index at width w = ceil(log2 n).  An index in
    [n, 2^w) yields an all-zero row; larger values alias modulo 2^w, so
    ``debug`` checks the range in the simulator.
    """
    if n < 1:
        raise ValueError("one-hot over an empty range")
    w = ring.bit_width(n)
    if debug:
        vals = peek(idx).view(np.int64)
        if np.any((vals < 0) | (vals >= n)):
            raise IndexError(f"secret index out of range [0, {n})")
    probe = ShareTensor(idx.pairs[..., None], 0, w)
    with _auto_phase(net, "gather"):
        return b2a(net, sec_equal(net, probe, np.arange(n)))


def onehot_from_public(net: PartyNet, ids, n: int) -> ShareTensor:
    """Trivially shared one-hot rows for public indices (no cost)."""
    ids = np.asarray(ids, dtype=np.int64)
    rows = (ids[..., None] == np.arange(n)).astype(np.uint64)
    return public(net, rows, 0)


def block_view(x: ShareTensor, s: int) -> ShareTensor:
    """[..., n, c] -> [..., n/s, s*c] (local)."""
    n, c = x.shape[-2], x.shape[-1]
    if n % s:
        raise ValueError(f"row count {n} is not divisible by cluster size {s}")
    return x.reshape(x.shape[:-2] + (n // s, s * c))


def gather_with_onehot(net: PartyNet, onehot: ShareTensor, tensors, cluster_size: int = 1) -> list[ShareTensor]:
    """Apply precomputed one-hot rows [..., m, n/s] to one or more tensors
    [..., n, c_i] in a single matmul; returns [..., m*s, c_i] each."""
    tensors = list(tensors)
    s = cluster_size
    blocks = [block_view(t, s) for t in tensors]
    fracs = {b.frac for b in blocks}
    if len(fracs) != 1:
        raise ValueError("tensors gathered together must share fraction bits")
    joined = concat(blocks, axis=-1) if len(blocks) > 1 else blocks[0]
    if onehot.shape[-1] != joined.shape[-2]:
        raise ValueError(f"one-hot width {onehot.shape[-1]} does not match {joined.shape[-2]} blocks")
    with _auto_phase(net, "gather"):
        out = sec_matmul(net, onehot, joined, out_frac=joined.frac)
    m = out.shape[-2]
    res, pos = [], 0
    for t in tensors:
        c = t.shape[-1]
        part = out[..., pos : pos + s * c]
        res.append(part.reshape(part.shape[:-2] + (m * s, c)))
        pos += s * c
    return res


def gather_tokens(
    net: PartyNet,
    K: ShareTensor,
    ids,
    granularity: str = "token",
    cluster_size: int = 1,
    debug: bool = False,
) -> ShareTensor:
    """Obliviously gather rows of K [..., n, d] addressed by secret indices.

    ``ids`` is a ShareTensor [..., m] (or a list of m index shares).  In
    cluster mode each index addresses ``cluster_size`` consecutive rows.
    Duplicate indices return duplicated rows.
    """
    if granularity not in ("token", "cluster"):
        raise ValueError(f"unknown granularity {granularity!r}")
    s = 1 if granularity == "token" else cluster_size
    if s < 1:
        raise ValueError("cluster size must be positive")
    n = K.shape[-2]
    if n % s:
        raise ValueError(f"cache length {n} is not divisible by cluster size {s}")
    idx = _as_index_tensor(ids)
    onehot = index_to_onehot(net, idx, n // s, debug=debug)
    return gather_with_onehot(net, onehot, [K], s)[0]


def compact_by_mask(net: PartyNet, mask: ShareTensor, count: int, tensors, positions: bool = True):
    """Order-preserving compaction of the rows flagged by a secret 0/1 mask.

    ``mask`` is an integer share [..., n] with exactly ``count`` ones per
    row (public count).  Row r of the output is the r-th flagged input row.
    Returns (compacted tensors, secret positions [..., count] or None,
    the [..., count, n] selection matrix).
    """
    n = mask.shape[-1]
    rank = mask.cumsum(axis=-1) - 1  # rank of each flagged position (local)
    probe = ShareTensor(rank.pairs[..., None, :], 0, ring.bit_width(n))
    with _auto_phase(net, "static"):
        hit = b2a(net, sec_equal(net, probe, np.arange(count)[:, None]))
        sel = sec_mul(net, hit, mask.expand_dims(-2))
    out = gather_with_onehot(net, sel, tensors, 1) if tensors else []
    pos = None
    if positions:
        pos = sel.scale_int(np.arange(n, dtype=np.int64)).sum(axis=-1)
        pos.width = ring.bit_width(n)
    return out, pos, sel


def gather_cost_model(T: int, C: int, k1: int, k2: int) -> dict:
    """Analytic cost of retrieving k1 tokens out of T versus k2 clusters out of C.

    Each retrieved index costs T (resp. C) equality tests at width
    ceil(log2 T) (resp. ceil(log2 C)); communication scales with count times
    width, so the ratio is (k1 T log T) / (k2 C log C).
    """
    if not (1 <= k1 <= T and 1 <= k2 <= C):
        raise ValueError("need 1 <= k1 <= T and 1 <= k2 <= C")
    wt, wc = ring.bit_width(T), ring.bit_width(C)
    denom = k2 * C * wc
    ratio = float("inf") if denom == 0 else (k1 * T * wt) / denom
    if T == C and k1 == k2:
        ratio = 1.0
    return {
        "comparisons": {"token": T, "cluster": C},
        "bit_width": {"token": wt, "cluster": wc},
        "total_equalities": {"token": k1 * T, "cluster": k2 * C},
        "comm_ratio": ratio,
    }
