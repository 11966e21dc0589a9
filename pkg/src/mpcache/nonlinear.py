"""Secure non-linear protocols over replicated shares.

Comparison and equality go through arithmetic-to-boolean conversion: the three
additive components are fed into a carry-save layer and a Kogge-Stone adder
evaluated on packed boolean shares.  Everything else is built from those
bits, oblivious selection and fixed-point multiplication.

With ``PartyNet(backend="ideal")`` comparisons and equalities are evaluated
inside the simulator; invocation counts and bit widths are charged exactly
as in the boolean backend, bytes and rounds are not.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from . import ring
from .ring import FRAC_BITS, NEG_INF_RAW, RING_BITS, RING_DTYPE
from .rss import (
    BoolShare,
    PartyNet,
    ShareTensor,
    bool_and,
    bool_or,
    concat,
    fresh_arith,
    fresh_bool,
    mul_public,
    peek,
    public,
    reconstruct_bool,
    sec_mul,
    stack,
    truncate,
)

EXP_FRAC = 30
EXP_SQUARINGS = 10
RECIP_FRAC = 30
RECIP_IN_FRAC = FRAC_BITS
RECIP_ITERATIONS = 3
RECIP_DOMAIN = (2.0**-8, 2.0**12)


@contextlib.contextmanager
def _auto_phase(net: PartyNet, name: str):
    """Charge to ``name`` unless a caller already opened a phase."""
    if net.phase_name == "default":
        with net.phase(name):
            yield
    else:
        yield


def _mask(bits: int) -> np.uint64:
    return np.uint64(ring.MASK if bits >= 64 else (1 << bits) - 1)


# -- conversions ----------------------------------------------------------------

def _component_bools(x: ShareTensor, bits: int) -> list[BoolShare]:
    """Trivial boolean sharings of the three additive components.

    Component x_j is held by P_j and P_{j-1}; each builds its slots from its
    own pair only.
    """
    m = _mask(bits)
    p = x.pairs & m
    zero = np.zeros_like(p[0, 0])
    out = []
    for j in range(3):
        pairs = np.empty_like(p)
        for i in range(3):
            first = p[i, 0] if i == j else zero
            second = p[i, 1] if (i + 1) % 3 == j else zero
            pairs[i, 0] = first
            pairs[i, 1] = second
        out.append(BoolShare(pairs, bits))
    return out


def a2b(net: PartyNet, x: ShareTensor, bits: int = RING_BITS) -> BoolShare:
    """Boolean shares of the low ``bits`` bits of x.  2 + ceil(log2 bits) rounds."""
    b0, b1, b2 = _component_bools(x, bits)
    # carry-save layer: s + 2*maj == b0 + b1 + b2; maj(a,b,c) = ((a^c)&(b^c))^c
    s = b0 ^ b1 ^ b2
    maj = bool_and(net, b0 ^ b2, b1 ^ b2, bits) ^ b2
    c = maj.shift_left(1, bits)
    return _add(net, s, c, bits)


def _add(net: PartyNet, a: BoolShare, b: BoolShare, bits: int) -> BoolShare:
    """Kogge-Stone parallel-prefix adder on packed boolean shares (mod 2^bits)."""
    p0 = a ^ b
    g = bool_and(net, a, b, bits)
    p = p0
    k = 1
    while k < bits:
        gs = g.shift_left(k, bits)
        if 2 * k < bits:
            ps = p.shift_left(k, bits)
            both = bool_and(
                net,
                BoolShare(np.stack([p.pairs, p.pairs], axis=2), bits),
                BoolShare(np.stack([gs.pairs, ps.pairs], axis=2), bits),
                bits,
            )
            g = g ^ BoolShare(both.pairs[:, :, 0], bits)
            p = BoolShare(both.pairs[:, :, 1], bits)
        else:
            g = g ^ bool_and(net, p, gs, bits)
        k *= 2
    return p0 ^ g.shift_left(1, bits)


def b2a(net: PartyNet, b: BoolShare) -> ShareTensor:
    """Arithmetic (integer, frac 0) shares of a single-bit boolean share.  One round.

    Uses a dealer bit r shared both ways: c = b xor r is opened (one bit
    per element and link) and b = c + (1 - 2c) r locally.
    """
    shape = b.shape
    bit = BoolShare(b.pairs & np.uint64(1), 1)
    r = net.dealer_random(shape) & np.uint64(1) if shape else net.dealer_random(()) & np.uint64(1)
    r_bool = fresh_bool(net, r, 1)
    r_arith = fresh_arith(net, r, 0)
    c = reconstruct_bool(net, bit ^ r_bool) & np.uint64(1)
    sign = np.int64(1) - 2 * c.astype(np.int64)
    return r_arith.scale_int(sign) + c


def _unpack_bits(b: BoolShare, nbits: int) -> BoolShare:
    """[..., ] packed words -> [..., nbits] single-bit shares (local)."""
    shifts = np.arange(nbits, dtype=RING_DTYPE)
    return BoolShare((b.pairs[..., None] >> shifts) & np.uint64(1), 1)


# -- comparison / equality ----------------------------------------------------------

def _charge_compare(net: PartyNet, n: int, width: int) -> None:
    cost = net.cost
    cost.comparison_invocations += n
    cost.comparison_rounds += 1
    cost.bit_widths[width] += n


def sec_less(net: PartyNet, a: ShareTensor, b: ShareTensor) -> BoolShare:
    """[a < b] in the signed interpretation, as a 1-bit boolean share.

    Valid for |a - b| < 2^63.  When both operands carry a public bit width w
    (secret indices) the adder runs over w + 1 bits and the invocation is
    charged at width w.
    """
    if a.shape != b.shape:
        raise ValueError(f"comparison needs equal shapes, got {a.shape} and {b.shape}")
    if a.frac != b.frac:
        raise ValueError("comparison operands must share fraction bits")
    width = RING_BITS
    if a.width is not None and b.width is not None:
        width = max(a.width, b.width)
    nbits = RING_BITS if width == RING_BITS else width + 1
    n = int(np.prod(a.shape, dtype=np.int64))
    with _auto_phase(net, "compare"):
        _charge_compare(net, n, width)
        d = a - b
        if net.backend == "ideal":
            raw = peek(d) & _mask(nbits)
            return fresh_bool(net, (raw >> np.uint64(nbits - 1)) & np.uint64(1), 1)
        return a2b(net, d, nbits).bit(nbits - 1)


def sec_equal(net: PartyNet, a: ShareTensor, b) -> BoolShare:
    """[a == b] for a secret index ``a`` of public width w and public ``b``.

    Broadcasts a against b.  Charged as one equality invocation of width w per
    output element.
    """
    w = a.width
    if w is None:
        raise ValueError("sec_equal needs a secret index with a declared bit width")
    b = np.asarray(b, dtype=np.int64)
    if np.any(b < 0) or np.any(b >= (1 << max(w, 0))):
        raise ValueError(f"public operand out of range for width {w}")
    shape = np.broadcast_shapes(a.shape, b.shape)
    n = int(np.prod(shape, dtype=np.int64))
    with _auto_phase(net, "equal"):
        cost = net.cost
        cost.equality_invocations += n
        cost.bit_widths[w] += n
        if w == 0:
            return BoolShare(public(net, np.ones(shape, RING_DTYPE), 0).pairs, 1)
        d = ShareTensor(np.broadcast_to(a.pairs, (3, 2) + shape), 0) - ring.as_ring(b)
        if net.backend == "ideal":
            raw = peek(d) & _mask(w)
            return fresh_bool(net, (raw == 0).astype(RING_DTYPE), 1)
        z = a2b(net, d, w).invert()
        width = w
        while width > 1:
            # AND the low half against the high half; an odd width pads the
            # low half with a public 1 so every level is a single round
            half = (width + 1) // 2
            hi = z.shift_right(width - half).with_bits(half)
            lo = z.and_public(_mask(width - half)).with_bits(half)
            if width % 2:
                lo = lo.xor_public(np.uint64(1 << (half - 1)))
            z = bool_and(net, lo, hi, half)
            width = half
        return z.with_bits(1)


def sec_select(net: PartyNet, c, x: ShareTensor, y: ShareTensor) -> ShareTensor:
    """c ? x : y computed as y + c * (x - y).  ``c`` is a 1-bit BoolShare or
    an integer (frac 0) ShareTensor holding 0/1."""
    if isinstance(c, BoolShare):
        c = b2a(net, c)
    diff = x - y
    try:
        np.broadcast_shapes(c.shape, diff.shape)
    except ValueError as exc:
        raise ValueError(f"selector shape {c.shape} does not broadcast to {diff.shape}") from exc
    return y + sec_mul(net, c, diff, out_frac=x.frac)


# -- max / top-k -----------------------------------------------------------------

def _tournament(net: PartyNet, v: ShareTensor):
    """Pairwise knockout along the last axis.  Left wins ties, so the overall
    winner is the first maximum.  Returns the value and per-level selector
    bits (1 = right operand won)."""
    levels = []
    cur = v
    while cur.shape[-1] > 1:
        n = cur.shape[-1]
        npair = n // 2
        left = cur[..., 0 : 2 * npair : 2]
        right = cur[..., 1 : 2 * npair : 2]
        c = b2a(net, sec_less(net, left, right))
        won = left + sec_mul(net, c, right - left, out_frac=cur.frac)
        if n % 2:
            won = concat([won, cur[..., n - 1 : n]], axis=-1)
        levels.append((n, c))
        cur = won
    return cur[..., 0], levels


def _winner_mask(net: PartyNet, levels, batch_shape) -> ShareTensor:
    """Expand selector bits top-down into a one-hot (integer) winner mask."""
    mask = public(net, np.ones(batch_shape + (1,), RING_DTYPE), 0)
    for n, c in reversed(levels):
        npair = n // 2
        parent = mask[..., :npair]
        t = sec_mul(net, parent, c)
        left, right = parent - t, t
        inter = ShareTensor(
            np.stack([left.pairs, right.pairs], axis=-1).reshape(left.pairs.shape[:-1] + (2 * npair,)), 0
        )
        if n % 2:
            inter = concat([inter, mask[..., npair : npair + 1]], axis=-1)
        mask = inter
    return mask


def _index_from_mask(mask: ShareTensor, n: int) -> ShareTensor:
    idx = mask.scale_int(np.arange(n, dtype=np.int64)).sum(axis=-1)
    idx.width = ring.bit_width(n)
    return idx


def sec_max(net: PartyNet, v: ShareTensor, axis: int = -1, return_mask: bool = False):
    """(max value, argmax) along ``axis`` via a binary tournament.

    n - 1 comparisons in ceil(log2 n) batched comparison rounds; the argmax is
    the first maximum.  With ``return_mask`` the integer one-hot winner mask is
    returned as a third element.
    """
    if v.ndim == 0:
        raise ValueError("sec_max needs at least one axis")
    v = v.swapaxes(axis, -1) if axis not in (-1, v.ndim - 1) else v
    n = v.shape[-1]
    if n == 0:
        raise ValueError("sec_max over an empty axis")
    value, levels = _tournament(net, v)
    mask = _winner_mask(net, levels, v.shape[:-1])
    idx = _index_from_mask(mask, n)
    if return_mask:
        return value, idx, mask
    return value, idx


def sec_min(net: PartyNet, v: ShareTensor, axis: int = -1) -> ShareTensor:
    return -sec_max_value(net, -v, axis)


def sec_max_value(net: PartyNet, v: ShareTensor, axis: int = -1) -> ShareTensor:
    """Maximum only (no argmax bookkeeping)."""
    v = v.swapaxes(axis, -1) if axis not in (-1, v.ndim - 1) else v
    if v.shape[-1] == 0:
        raise ValueError("sec_max over an empty axis")
    value, _ = _tournament(net, v)
    return value


def sec_topk(net: PartyNet, v: ShareTensor, k: int, return_mask: bool = False, return_onehot: bool = False):
    """Indices of the k largest entries along the last axis, best first.

    k rounds of ``sec_max``; each winner is knocked out by obliviously setting
    it to the reserved minus-infinity.  Costs exactly k * (n - 1)
    comparisons per row.  ``return_mask`` adds the integer 0/1 mask of all
    selected positions; ``return_onehot`` adds the per-winner one-hot rows
    stacked as [..., k, n].
    """
    n = v.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"top-k needs 1 <= k <= n, got k={k}, n={n}")
    neg = ring.as_ring(NEG_INF_RAW)
    out, rows = [], []
    with _auto_phase(net, "topk"):
        cur = v
        for step in range(k):
            _, idx, mask = sec_max(net, cur, return_mask=True)
            out.append(idx)
            rows.append(mask)
            if step + 1 < k:
                cur = cur + sec_mul(net, mask, (-cur) + neg, out_frac=cur.frac)
    if not (return_mask or return_onehot):
        return out
    extra = [out]
    if return_mask:
        total = rows[0]
        for r in rows[1:]:
            total = total + r
        extra.append(total)
    if return_onehot:
        extra.append(stack(rows, axis=-2))
    return tuple(extra)


# -- exponential, reciprocal, softmax -----------------------------------------------

def sec_exp(net: PartyNet, x: ShareTensor, out_frac: int = EXP_FRAC, squarings: int = EXP_SQUARINGS) -> ShareTensor:
    """exp(x) for x in [-16, 0] by range reduction and repeated squaring.

    With y = x / 2^t the base 1 + y + y^2/2 + y^3/6 is squared t times at
    ``EXP_FRAC`` fraction bits.  The absolute error stays around 2^-20 over
    the domain; the relative error is bounded by the output resolution near
    -16 (below 1%).  Inputs below -2^t are outside the domain.
    """
    work = EXP_FRAC
    scaled = ShareTensor(x.pairs, x.frac + squarings)
    y = truncate(net, scaled, work) if scaled.frac > work else scaled.with_frac(work)
    y2 = sec_mul(net, y, y, out_frac=work)
    tail = mul_public(net, y, 1.0 / 6.0) + ring.fx_encode(0.5, work)
    base = y + sec_mul(net, y2, tail, out_frac=work) + ring.fx_encode(1.0, work)
    for _ in range(squarings):
        base = sec_mul(net, base, base, out_frac=work)
    return truncate(net, base, out_frac) if out_frac < work else base.with_frac(out_frac)


def sec_recip(net: PartyNet, x: ShareTensor, out_frac: int = RECIP_FRAC, iterations: int = RECIP_ITERATIONS) -> ShareTensor:
    """1/x for x in [2^-8, 2^12].

    The input is normalised to x' in [0.5, 1) by locating its leading bit
    (boolean prefix-OR on the A2B bits), then refined with Newton steps
    y <- y (2 - x' y) from the linear start 2.9142 - 2x', and rescaled.
    """
    work = RECIP_FRAC
    fin = RECIP_IN_FRAC
    if x.frac > fin:
        x = truncate(net, x, fin)
    elif x.frac < fin:
        x = x.with_frac(fin)
    # raw X = x 2^fin lies in [2^10, 2^30] on the domain; msb m in [10, 30]
    bits = a2b(net, x, RING_BITS)
    y = bits
    k = 1
    while k < RING_BITS:
        y = bool_or(net, y, y.shift_right(k), RING_BITS)
        k *= 2
    onehot = y ^ y.shift_right(1)
    top = 32
    lanes = b2a(net, _unpack_bits(onehot, top))
    weights = np.array([1 << (top - 1 - j) for j in range(top)], dtype=np.uint64)
    scale = lanes.scale_int(weights).sum(axis=-1)  # 2^(31 - m)
    xn = sec_mul(net, ShareTensor(x.pairs, 32), scale, out_frac=work)  # x' in [0.5, 1)
    est = xn.scale_int(-2) + ring.fx_encode(2.9142, work)
    two = ring.fx_encode(2.0, work)
    for _ in range(iterations):
        e = sec_mul(net, xn, est, out_frac=work)
        est = sec_mul(net, est, (-e) + two, out_frac=work)
    return sec_mul(net, ShareTensor(est.pairs, work + 32 - fin), scale, out_frac=out_frac)


def sec_softmax(net: PartyNet, x: ShareTensor, axis: int = -1) -> ShareTensor:
    """Softmax along ``axis``: max-subtract, exp, sum, reciprocal, scale.

    The row sum must stay within the reciprocal domain (n <= 4096).
    """
    moved = axis not in (-1, x.ndim - 1)
    if moved:
        x = x.swapaxes(axis, -1)
    if x.shape[-1] == 0:
        raise ValueError("softmax over an empty axis")
    with _auto_phase(net, "softmax"):
        m = sec_max_value(net, x)
        d = x - m.expand_dims(-1)
        e = sec_exp(net, d)
        s = e.sum(axis=-1, keepdims=True)
        r = sec_recip(net, s)
        p = sec_mul(net, e, r, out_frac=x.frac)
    return p.swapaxes(axis, -1) if moved else p


def plain_topk(v: np.ndarray, k: int) -> np.ndarray:
    """Reference top-k along the last axis: descending, ties to the lowest index."""
    order = np.argsort(-np.asarray(v), axis=-1, kind="stable")
    return order[..., :k]


def plain_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def comparison_layers(n: int) -> int:
    return math.ceil(math.log2(n)) if n > 1 else 0
