"""Arithmetic in Z_{2^64} and a fixed-point encoding of reals on top of it.

Ring elements live in ``numpy.uint64`` arrays, so wraparound is native.  The
signed interpretation is two's complement over the same 64 bits.
"""

from __future__ import annotations

import numpy as np

RING_BITS = 64
FRAC_BITS = 18
RING_DTYPE = np.uint64
MASK = (1 << RING_BITS) - 1

# Reserved "minus infinity" used to knock out top-k winners.  Chosen at -2^62
# rather than -2^63 so that a - b never wraps for operands inside the domain
# of the comparison protocol (|a|, |b| < 2^62).
NEG_INF_RAW = -(1 << 62)


def as_ring(x) -> np.ndarray:
    """Coerce ints / int arrays into uint64 ring elements (reducing mod 2^64)."""
    if isinstance(x, np.ndarray) and x.dtype != object:
        if x.dtype == RING_DTYPE:
            return x
        if x.dtype.kind in "iu":
            return x.astype(np.int64, copy=False).view(RING_DTYPE) if x.dtype.kind == "i" else x.astype(RING_DTYPE)
        raise TypeError(f"cannot interpret dtype {x.dtype} as ring elements")
    if isinstance(x, (int, np.integer)):
        return np.array(int(x) & MASK, dtype=RING_DTYPE)
    arr = np.asarray(x)
    if arr.dtype == object:
        return np.array([int(v) & MASK for v in arr.ravel()], dtype=RING_DTYPE).reshape(arr.shape)
    return as_ring(arr)


def ring_add(a, b) -> np.ndarray:
    return as_ring(a) + as_ring(b)


def ring_sub(a, b) -> np.ndarray:
    return as_ring(a) - as_ring(b)


def ring_mul(a, b) -> np.ndarray:
    return as_ring(a) * as_ring(b)


def ring_neg(a) -> np.ndarray:
    return np.zeros((), RING_DTYPE) - as_ring(a)


def to_signed(a) -> np.ndarray:
    """Two's-complement view: r if r < 2^63 else r - 2^64."""
    return as_ring(a).view(np.int64)


def from_signed(a) -> np.ndarray:
    return np.asarray(a, dtype=np.int64).view(RING_DTYPE)


def fx_encode(x, f: int = FRAC_BITS) -> np.ndarray:
    """Encode reals as ring elements with ``f`` fraction bits.

    Rounds to nearest with ties away from zero.  Raises ``OverflowError`` for
    values outside the signed range |x| < 2^(63 - f).
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot encode non-finite values")
    limit = float(2 ** (RING_BITS - f - 1))
    if np.any(np.abs(x) >= limit):
        raise OverflowError(f"value outside fixed-point range |x| < 2^{RING_BITS - f - 1}")
    scaled = np.sign(x) * np.floor(np.abs(x) * float(1 << f) + 0.5)
    if np.any(np.abs(scaled) >= 2.0**63):
        raise OverflowError("value rounds outside the signed ring range")
    return scaled.astype(np.int64).view(RING_DTYPE)


def fx_decode(raw, f: int = FRAC_BITS) -> np.ndarray:
    return to_signed(raw).astype(np.float64) / float(1 << f)


def fx_truncate(v, f: int = FRAC_BITS) -> np.ndarray:
    """Arithmetic right shift by ``f`` in the signed interpretation (floor)."""
    return (to_signed(v) >> np.int64(f)).view(RING_DTYPE)


def fx_mul(a, b, f: int = FRAC_BITS) -> np.ndarray:
    """Plaintext fixed-point product: wrapped ring product, then truncation."""
    return fx_truncate(ring_mul(a, b), f)


def bit_width(n: int) -> int:
    """ceil(log2 n), the bits needed to address n slots (0 for n <= 1)."""
    if n <= 1:
        return 0
    return int(n - 1).bit_length()
