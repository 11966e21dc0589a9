"""Simulated honest-but-curious three-party computation over 2-out-of-3
replicated secret sharing.

A secret x in Z_{2^64} is split as x = x0 + x1 + x2 and party P_i holds the
pair (x_i, x_{i+1}).  ``ShareTensor.pairs`` stores exactly those per-party
pairs, shape ``(3, 2, *dims)``; every local operation below only touches a
party's own pair, and everything a party learns from others goes through
``PartyNet`` message queues so that rounds and bytes are accounted for.
"""

from __future__ import annotations

import contextlib
import json
from collections import Counter, defaultdict, deque
from dataclasses import dataclass, field

import numpy as np

from . import ring
from .ring import FRAC_BITS, RING_BITS, RING_DTYPE

# Offset used by truncation: c = z + 2^62 + r never wraps for |z| < 2^62.
# The correction removes the shifted offset again; both must agree (the
# self-test corrupts the correction to check that it notices).
_TRUNC_OFFSET_BITS = 62
_TRUNC_CORRECTION_BITS = 62


class IntegrityError(RuntimeError):
    """Replicated pairs disagree; always a simulator bug, never an adversary."""


@dataclass
class PhaseCost:
    rounds: int = 0
    bytes_sent: int = 0
    mul_invocations: int = 0
    comparison_invocations: int = 0
    comparison_rounds: int = 0
    equality_invocations: int = 0
    bit_widths: Counter = field(default_factory=Counter)

    def add(self, other: "PhaseCost") -> None:
        self.rounds += other.rounds
        self.bytes_sent += other.bytes_sent
        self.mul_invocations += other.mul_invocations
        self.comparison_invocations += other.comparison_invocations
        self.comparison_rounds += other.comparison_rounds
        self.equality_invocations += other.equality_invocations
        self.bit_widths.update(other.bit_widths)

    def to_dict(self) -> dict:
        return {
            "rounds": self.rounds,
            "bytes_sent": self.bytes_sent,
            "mul_invocations": self.mul_invocations,
            "comparison_invocations": self.comparison_invocations,
            "comparison_rounds": self.comparison_rounds,
            "equality_invocations": self.equality_invocations,
            "bit_widths": {str(k): v for k, v in sorted(self.bit_widths.items())},
        }

    def copy(self) -> "PhaseCost":
        out = PhaseCost()
        out.add(self)
        return out

    def minus(self, other: "PhaseCost") -> "PhaseCost":
        out = PhaseCost(
            self.rounds - other.rounds,
            self.bytes_sent - other.bytes_sent,
            self.mul_invocations - other.mul_invocations,
            self.comparison_invocations - other.comparison_invocations,
            self.comparison_rounds - other.comparison_rounds,
            self.equality_invocations - other.equality_invocations,
        )
        out.bit_widths = Counter(self.bit_widths)
        out.bit_widths.subtract(other.bit_widths)
        out.bit_widths = +out.bit_widths
        return out


class CostLedger:
    """Per-phase protocol counters.  Online cost only: PRG and dealer setup
    (zero-sharings, truncation pairs) is not charged."""

    def __init__(self):
        self.phases: dict[str, PhaseCost] = defaultdict(PhaseCost)

    def __getitem__(self, phase: str) -> PhaseCost:
        return self.phases[phase]

    def total(self) -> PhaseCost:
        out = PhaseCost()
        for cost in self.phases.values():
            out.add(cost)
        return out

    def snapshot(self) -> dict[str, PhaseCost]:
        return {name: cost.copy() for name, cost in self.phases.items()}

    def since(self, snap: dict[str, PhaseCost]) -> dict[str, PhaseCost]:
        """Per-phase cost accrued after ``snap`` was taken (zero phases dropped)."""
        out = {}
        for name, cost in self.phases.items():
            delta = cost.minus(snap.get(name, PhaseCost()))
            if delta.to_dict() != PhaseCost().to_dict():
                out[name] = delta
        return out

    def to_dict(self) -> dict:
        return {name: cost.to_dict() for name, cost in sorted(self.phases.items())}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


class PartyNet:
    """Three simulated parties, per-link FIFO queues and seeded randomness.

    A *round* is one enqueue/flush cycle: every message sent before ``flush``
    is delivered together.  Messages on the same link within a round are
    coalesced for byte accounting.

    ``backend`` selects how comparisons are evaluated: ``"boolean"`` runs the
    real boolean-circuit protocols, ``"ideal"`` evaluates the functionality
    inside the simulator and charges the same invocation counts with zero
    bytes and rounds (debugging only).

    Not thread-safe; use one instance per protocol execution.
    """

    def __init__(self, seed: int = 0, backend: str = "boolean", record_transcript: bool = False):
        if backend not in ("boolean", "ideal"):
            raise ValueError(f"unknown comparison backend {backend!r}")
        self.seed = seed
        self.backend = backend
        ss = np.random.SeedSequence(seed)
        prg_seeds, dealer_seed, input_seed = ss.spawn(3)
        # key j is known to parties j and j-1, so P_i can expand keys i and i+1
        self._keys = [np.random.PCG64(s) for s in prg_seeds.spawn(3)]
        self._dealer = np.random.PCG64(dealer_seed)
        self._inputs = np.random.PCG64(input_seed)
        self.ledger = CostLedger()
        self.round = 0
        self._queues: dict[tuple[int, int], deque] = {
            (s, d): deque() for s in range(3) for d in range(3) if s != d
        }
        self._phase_stack = ["default"]
        self.record_transcript = record_transcript
        self.transcript: list[dict] = []

    # -- accounting -------------------------------------------------------
    @property
    def phase_name(self) -> str:
        return self._phase_stack[-1]

    @contextlib.contextmanager
    def phase(self, name: str):
        self._phase_stack.append(name)
        try:
            yield self
        finally:
            self._phase_stack.pop()

    @property
    def cost(self) -> PhaseCost:
        return self.ledger[self.phase_name]

    # -- messaging --------------------------------------------------------
    def send(self, src: int, dst: int, payload: np.ndarray, bits: int = RING_BITS) -> None:
        if src == dst:
            raise ValueError("parties do not message themselves")
        self._queues[(src, dst)].append((np.array(payload, copy=True), bits))

    def flush(self) -> dict[tuple[int, int], list[np.ndarray]]:
        delivered = {}
        cost = self.cost
        sent_any = False
        for link, queue in self._queues.items():
            if not queue:
                continue
            payloads, nbits = [], 0
            while queue:
                payload, bits = queue.popleft()
                payloads.append(payload)
                nbits += payload.size * bits
            nbytes = (nbits + 7) // 8
            cost.bytes_sent += nbytes
            delivered[link] = payloads
            sent_any = True
            if self.record_transcript:
                self.transcript.append(
                    {"round": self.round, "phase": self.phase_name, "link": list(link), "bytes": nbytes}
                )
        if sent_any:
            self.round += 1
            cost.rounds += 1
        return delivered

    def transcript_jsonl(self) -> str:
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.transcript)

    # -- correlated randomness -------------------------------------------
    def _key_stream(self, j: int, shape) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        return self._keys[j].random_raw(n).astype(RING_DTYPE).reshape(shape)

    def zero_sharing(self, shape) -> np.ndarray:
        """alpha_0 + alpha_1 + alpha_2 = 0; P_i derives alpha_i from keys i, i+1."""
        r = np.stack([self._key_stream(j, shape) for j in range(3)])
        return r - np.roll(r, -1, axis=0)

    def zero_xor_sharing(self, shape) -> np.ndarray:
        r = np.stack([self._key_stream(j, shape) for j in range(3)])
        return r ^ np.roll(r, -1, axis=0)

    def dealer_random(self, shape) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        return self._dealer.random_raw(n).astype(RING_DTYPE).reshape(shape)

    def input_random(self, shape) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        return self._inputs.random_raw(n).astype(RING_DTYPE).reshape(shape)


def _pairs_from_components(comp: np.ndarray) -> np.ndarray:
    """(3, *dims) additive components -> (3, 2, *dims) per-party pairs."""
    return np.stack([comp, np.roll(comp, -1, axis=0)], axis=1)


class ShareTensor:
    """Replicated arithmetic shares of a tensor of ring elements.

    ``frac`` is the number of fixed-point fraction bits (0 for integers).
    ``width`` is set for secret indices and names the public bit width of the
    values (used by the equality protocol).
    """

    __slots__ = ("pairs", "frac", "width")

    def __init__(self, pairs: np.ndarray, frac: int = FRAC_BITS, width: int | None = None):
        if pairs.shape[:2] != (3, 2) or pairs.dtype != RING_DTYPE:
            raise ValueError("pairs must be a uint64 array of shape (3, 2, ...)")
        self.pairs = pairs
        self.frac = frac
        self.width = width

    @property
    def shape(self) -> tuple:
        return self.pairs.shape[2:]

    @property
    def ndim(self) -> int:
        return self.pairs.ndim - 2

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        return f"ShareTensor(shape={self.shape}, frac={self.frac}, width={self.width})"

    def components(self) -> np.ndarray:
        """The additive components x_i as party P_i sees them (its first slot)."""
        return self.pairs[:, 0]

    def _like(self, pairs, frac=None, width=None) -> "ShareTensor":
        return ShareTensor(pairs, self.frac if frac is None else frac, width)

    # -- shape manipulation (local) ----------------------------------------
    def __getitem__(self, idx) -> "ShareTensor":
        if not isinstance(idx, tuple):
            idx = (idx,)
        return self._like(self.pairs[(slice(None), slice(None)) + idx], width=self.width)

    def reshape(self, *shape) -> "ShareTensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self._like(self.pairs.reshape((3, 2) + tuple(shape)), width=self.width)

    def swapaxes(self, a: int, b: int) -> "ShareTensor":
        a = a % self.ndim + 2
        b = b % self.ndim + 2
        return self._like(np.swapaxes(self.pairs, a, b), width=self.width)

    @property
    def T(self) -> "ShareTensor":
        return self.swapaxes(-1, -2)

    def expand_dims(self, axis: int) -> "ShareTensor":
        axis = axis % (self.ndim + 1) + 2
        return self._like(np.expand_dims(self.pairs, axis), width=self.width)

    def broadcast_to(self, shape) -> "ShareTensor":
        return self._like(np.broadcast_to(self.pairs, (3, 2) + tuple(shape)).copy(), width=self.width)

    def sum(self, axis: int = -1, keepdims: bool = False) -> "ShareTensor":
        axis = axis % self.ndim + 2
        return self._like(self.pairs.sum(axis=axis, dtype=RING_DTYPE, keepdims=keepdims))

    def cumsum(self, axis: int = -1) -> "ShareTensor":
        axis = axis % self.ndim + 2
        return self._like(np.cumsum(self.pairs, axis=axis, dtype=RING_DTYPE))

    def copy(self) -> "ShareTensor":
        return self._like(self.pairs.copy(), width=self.width)

    # -- linear algebra (local) -------------------------------------------
    def _check(self, other: "ShareTensor"):
        if self.frac != other.frac:
            raise ValueError(f"fraction bits differ ({self.frac} vs {other.frac})")

    def __add__(self, other):
        if isinstance(other, ShareTensor):
            self._check(other)
            return self._like(self.pairs + other.pairs)
        return add_public(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, ShareTensor):
            self._check(other)
            return self._like(self.pairs - other.pairs)
        return add_public(self, ring.ring_neg(ring.as_ring(np.asarray(other))))

    def __rsub__(self, other):
        return (-self) + other

    def __neg__(self):
        return self._like(np.zeros((), RING_DTYPE) - self.pairs)

    def scale_int(self, k) -> "ShareTensor":
        """Multiply by public integers (no truncation, exact)."""
        return self._like(self.pairs * ring.as_ring(np.asarray(k)))

    def with_frac(self, frac: int) -> "ShareTensor":
        """Relabel with more fraction bits by a local left shift."""
        if frac < self.frac:
            raise ValueError("lowering precision needs the truncation protocol; use truncate()")
        return ShareTensor(self.pairs << np.uint64(frac - self.frac), frac)


def add_public(a: ShareTensor, raw) -> ShareTensor:
    """Add public raw ring values: they go into component x_0, held by P0 and P2."""
    c = ring.as_ring(np.asarray(raw))
    pairs = np.broadcast_to(a.pairs, (3, 2) + np.broadcast_shapes(a.shape, c.shape)).copy()
    pairs[0, 0] += c
    pairs[2, 1] += c
    return ShareTensor(pairs, a.frac)


def public(net: PartyNet, raw, frac: int = FRAC_BITS) -> ShareTensor:
    """Trivial sharing of a public constant (no communication)."""
    c = ring.as_ring(np.asarray(raw))
    comp = np.zeros((3,) + c.shape, RING_DTYPE)
    comp[0] = c
    return ShareTensor(_pairs_from_components(comp), frac)


def concat(tensors, axis: int = -1) -> ShareTensor:
    fracs = {t.frac for t in tensors}
    if len(fracs) != 1:
        raise ValueError("cannot concatenate tensors with different fraction bits")
    ndim = tensors[0].ndim
    return ShareTensor(np.concatenate([t.pairs for t in tensors], axis=axis % ndim + 2), fracs.pop())


def stack(tensors, axis: int = 0) -> ShareTensor:
    fracs = {t.frac for t in tensors}
    if len(fracs) != 1:
        raise ValueError("cannot stack tensors with different fraction bits")
    ndim = tensors[0].ndim + 1
    return ShareTensor(np.stack([t.pairs for t in tensors], axis=axis % ndim + 2), fracs.pop())


# -- input / output ------------------------------------------------------------

def share(net: PartyNet, raw, frac: int = FRAC_BITS, width: int | None = None) -> ShareTensor:
    """Secret-share a fixed-point-encoded (or integer) tensor.

    The owner samples x0, x1 uniformly, sets x2 = x - x0 - x1 and sends each
    other party its missing components (charged to the current phase).
    """
    x = ring.as_ring(np.asarray(raw))
    x0 = net.input_random(x.shape)
    x1 = net.input_random(x.shape)
    comp = np.stack([x0, x1, x - x0 - x1])
    if x.size:
        # owner P0 already holds (x0, x1); P1 needs (x1, x2), P2 needs (x2, x0)
        net.send(0, 1, comp[1:3])
        net.send(0, 2, comp[[2, 0]])
        net.flush()
    return ShareTensor(_pairs_from_components(comp), frac, width)


def share_float(net: PartyNet, x, frac: int = FRAC_BITS) -> ShareTensor:
    return share(net, ring.fx_encode(x, frac), frac)


def reconstruct(net: PartyNet, s: ShareTensor) -> np.ndarray:
    """Open a shared tensor to all parties; returns raw ring elements.

    Each P_i receives the missing component x_{i+2} from P_{i+1}, which also
    lets it cross-check the replicated copy held by P_{i+2}.
    """
    p = s.pairs
    for i in range(3):
        if not np.array_equal(p[i, 1], p[(i + 1) % 3, 0]):
            raise IntegrityError(f"party {i} and party {(i + 1) % 3} disagree on component {(i + 1) % 3}")
    if s.size:
        for i in range(3):
            net.send((i + 1) % 3, i, p[(i + 1) % 3, 1])
        inbox = net.flush()
    else:
        return np.zeros(s.shape, RING_DTYPE)
    views = []
    with np.errstate(over="ignore"):  # 0-d operands become numpy scalars
        for i in range(3):
            missing = inbox[((i + 1) % 3, i)][0]
            views.append(np.asarray(p[i, 0] + p[i, 1] + missing, dtype=RING_DTYPE))
    if not (np.array_equal(views[0], views[1]) and np.array_equal(views[1], views[2])):
        raise IntegrityError("parties reconstructed different values")
    return views[0]


def reveal_float(net: PartyNet, s: ShareTensor) -> np.ndarray:
    return ring.fx_decode(reconstruct(net, s), s.frac)


def peek(s: ShareTensor) -> np.ndarray:
    """Simulator-only plaintext view (no messages, no ledger).  Used by the
    ideal backend and by debug assertions, never by protocol logic."""
    return s.pairs[:, 0].sum(axis=0, dtype=RING_DTYPE)


# -- resharing, multiplication, truncation ---------------------------------------

def _reshare(net: PartyNet, z: np.ndarray, frac: int) -> ShareTensor:
    """Turn a 3-out-of-3 additive sharing z_i into replicated shares.

    P_i masks z_i with its zero-sharing slot and sends it to P_{i-1}.
    """
    if z.shape[1:] and 0 in z.shape[1:]:
        return ShareTensor(np.zeros((3, 2) + z.shape[1:], RING_DTYPE), frac)
    zp = z + net.zero_sharing(z.shape[1:])
    for i in range(3):
        net.send(i, (i - 1) % 3, zp[i])
    inbox = net.flush()
    comp = [zp[i] for i in range(3)]
    recv = [inbox[((i + 1) % 3, i)][0] for i in range(3)]
    pairs = np.stack([np.stack([comp[i], recv[i]]) for i in range(3)])
    return ShareTensor(pairs, frac)


def _reshare_truncated(net: PartyNet, z: np.ndarray, shift: int, frac: int) -> ShareTensor:
    """Reshare a 3-out-of-3 sharing of z and divide by 2^shift in one round.

    Uses a dealer pair (r, r >> shift) with r uniform in [0, 2^63): P0 and P2
    learn c = z + 2^62 + r, which cannot wrap for |z| < 2^62, and output
    (c >> shift) - 2^(62-shift) - [[r >> shift]].  The result equals
    floor(z / 2^shift) plus a carry bit that is 1 with probability equal to
    the discarded fraction, i.e. an unbiased stochastic rounding (< 1 ulp).
    """
    shape = z.shape[1:]
    if 0 in shape:
        return ShareTensor(np.zeros((3, 2) + shape, RING_DTYPE), frac)
    r = net.dealer_random(shape) >> np.uint64(1)
    r_hi = r >> np.uint64(shift)
    r_parts = net.dealer_random((2,) + shape)
    r_comp = np.stack([r_parts[0], r_parts[1], r - r_parts[0] - r_parts[1]])
    hi_parts = net.dealer_random((2,) + shape)
    hi_comp = np.stack([hi_parts[0], hi_parts[1], r_hi - hi_parts[0] - hi_parts[1]])

    w = z + r_comp
    net.send(1, 0, w[1])
    net.send(1, 2, w[1])
    net.send(0, 2, w[0])
    net.send(2, 0, w[2])
    inbox = net.flush()
    offset = np.uint64(1 << _TRUNC_OFFSET_BITS)
    c_at_p0 = w[0] + inbox[(1, 0)][0] + inbox[(2, 0)][0] + offset
    c_at_p2 = inbox[(0, 2)][0] + inbox[(1, 2)][0] + w[2] + offset
    const = np.uint64(1 << (_TRUNC_CORRECTION_BITS - shift))
    y = np.zeros((3,) + shape, RING_DTYPE) - hi_comp
    pairs = _pairs_from_components(y)
    pairs[0, 0] += (c_at_p0 >> np.uint64(shift)) - const
    pairs[2, 1] += (c_at_p2 >> np.uint64(shift)) - const
    return ShareTensor(pairs, frac)


def _cross_terms(a: ShareTensor, b: ShareTensor, op) -> np.ndarray:
    pa, pb = a.pairs, b.pairs
    # P_i: x_i y_i + x_{i+1} y_i + x_i y_{i+1}
    return np.stack([op(pa[i, 0], pb[i, 0]) + op(pa[i, 1], pb[i, 0]) + op(pa[i, 0], pb[i, 1]) for i in range(3)])


def _finish_product(net: PartyNet, z: np.ndarray, frac_in: int, out_frac: int | None, default: int) -> ShareTensor:
    out = default if out_frac is None else out_frac
    shift = frac_in - out
    if shift < 0:
        raise ValueError("product has fewer fraction bits than requested")
    if shift == 0:
        return _reshare(net, z, out)
    return _reshare_truncated(net, z, shift, out)


def sec_mul(net: PartyNet, a: ShareTensor, b: ShareTensor, out_frac: int | None = None) -> ShareTensor:
    """Element-wise product (broadcasting).  One round.

    The raw product carries a.frac + b.frac fraction bits and is truncated to
    ``out_frac`` (default max(a.frac, b.frac)) inside the resharing round, so
    integer-by-fixed products (e.g. selection bits) stay exact.
    """
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ValueError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc
    z = _cross_terms(a, b, np.multiply)
    net.cost.mul_invocations += int(np.prod(z.shape[1:], dtype=np.int64))
    return _finish_product(net, z, a.frac + b.frac, out_frac, max(a.frac, b.frac))


def sec_matmul(net: PartyNet, a: ShareTensor, b: ShareTensor, out_frac: int | None = None) -> ShareTensor:
    """Batched matrix product (numpy matmul semantics).  One resharing round;
    truncation applied once per output element."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"cannot matmul shapes {a.shape} and {b.shape}")
    z = _cross_terms(a, b, np.matmul)
    inner = a.shape[-1]
    net.cost.mul_invocations += int(np.prod(z.shape[1:], dtype=np.int64)) * inner
    return _finish_product(net, z, a.frac + b.frac, out_frac, max(a.frac, b.frac))


def sec_add(a: ShareTensor, b: ShareTensor) -> ShareTensor:
    """Local addition; no messages."""
    if a.shape != b.shape:
        raise ValueError(f"cannot add shapes {a.shape} and {b.shape}")
    return a + b


def sec_sub(a: ShareTensor, b: ShareTensor) -> ShareTensor:
    if a.shape != b.shape:
        raise ValueError(f"cannot subtract shapes {a.shape} and {b.shape}")
    return a - b


def mul_public(net: PartyNet, a: ShareTensor, c, c_frac: int | None = None) -> ShareTensor:
    """Multiply by public reals.  Local scaling plus one truncation round."""
    c_frac = a.frac if c_frac is None else c_frac
    raw = ring.fx_encode(c, c_frac)
    z = a.pairs[:, 0] * raw
    if c_frac == 0:
        return a.scale_int(raw)
    return _reshare_truncated(net, np.broadcast_to(z, (3,) + np.broadcast_shapes(a.shape, raw.shape)).copy(), c_frac, a.frac)


def truncate(net: PartyNet, a: ShareTensor, out_frac: int) -> ShareTensor:
    """Drop fraction bits: a.frac -> out_frac.  One round."""
    if out_frac == a.frac:
        return a
    if out_frac > a.frac:
        return a.with_frac(out_frac)
    return _reshare_truncated(net, a.pairs[:, 0].copy(), a.frac - out_frac, out_frac)


# -- boolean shares -------------------------------------------------------------

class BoolShare:
    """Replicated XOR shares of bit-vectors packed into uint64 words.

    Only the low ``bits`` bits of each word are meaningful; byte accounting
    charges ``bits`` per element and message.
    """

    __slots__ = ("pairs", "bits")

    def __init__(self, pairs: np.ndarray, bits: int = 1):
        self.pairs = pairs
        self.bits = bits

    @property
    def shape(self) -> tuple:
        return self.pairs.shape[2:]

    def __repr__(self) -> str:
        return f"BoolShare(shape={self.shape}, bits={self.bits})"

    def __getitem__(self, idx) -> "BoolShare":
        if not isinstance(idx, tuple):
            idx = (idx,)
        return BoolShare(self.pairs[(slice(None), slice(None)) + idx], self.bits)

    def __xor__(self, other: "BoolShare") -> "BoolShare":
        return BoolShare(self.pairs ^ other.pairs, max(self.bits, other.bits))

    def xor_public(self, c) -> "BoolShare":
        c = ring.as_ring(np.asarray(c))
        pairs = np.broadcast_to(self.pairs, (3, 2) + np.broadcast_shapes(self.shape, c.shape)).copy()
        pairs[0, 0] ^= c
        pairs[2, 1] ^= c
        return BoolShare(pairs, self.bits)

    def invert(self) -> "BoolShare":
        mask = np.uint64((1 << self.bits) - 1) if self.bits < 64 else np.uint64(ring.MASK)
        return self.xor_public(mask)

    def and_public(self, c) -> "BoolShare":
        return BoolShare(self.pairs & ring.as_ring(np.asarray(c)), self.bits)

    def shift_right(self, k: int) -> "BoolShare":
        return BoolShare(self.pairs >> np.uint64(k), self.bits)

    def shift_left(self, k: int, bits: int | None = None) -> "BoolShare":
        bits = self.bits if bits is None else bits
        mask = np.uint64((1 << bits) - 1) if bits < 64 else np.uint64(ring.MASK)
        return BoolShare((self.pairs << np.uint64(k)) & mask, bits)

    def bit(self, i: int) -> "BoolShare":
        return BoolShare((self.pairs >> np.uint64(i)) & np.uint64(1), 1)

    def with_bits(self, bits: int) -> "BoolShare":
        return BoolShare(self.pairs, bits)


def bool_from_components(comp: np.ndarray, bits: int) -> BoolShare:
    return BoolShare(_pairs_from_components(comp), bits)


def bool_and(net: PartyNet, a: BoolShare, b: BoolShare, bits: int | None = None) -> BoolShare:
    """Bitwise AND of packed boolean shares.  One round."""
    bits = max(a.bits, b.bits) if bits is None else bits
    pa, pb = a.pairs, b.pairs
    shape = np.broadcast_shapes(a.shape, b.shape)
    z = np.stack(
        [(pa[i, 0] & pb[i, 0]) ^ (pa[i, 1] & pb[i, 0]) ^ (pa[i, 0] & pb[i, 1]) for i in range(3)]
    )
    z = np.broadcast_to(z, (3,) + shape)
    if 0 in shape:
        return BoolShare(np.zeros((3, 2) + shape, RING_DTYPE), bits)
    zp = z ^ net.zero_xor_sharing(shape)
    for i in range(3):
        net.send(i, (i - 1) % 3, zp[i], bits=bits)
    inbox = net.flush()
    pairs = np.stack([np.stack([zp[i], inbox[((i + 1) % 3, i)][0]]) for i in range(3)])
    return BoolShare(pairs, bits)


def bool_or(net: PartyNet, a: BoolShare, b: BoolShare, bits: int | None = None) -> BoolShare:
    return a ^ b ^ bool_and(net, a, b, bits)


def reconstruct_bool(net: PartyNet, s: BoolShare) -> np.ndarray:
    p = s.pairs
    if not s.shape or np.prod(s.shape) > 0:
        for i in range(3):
            net.send((i + 1) % 3, i, p[(i + 1) % 3, 1], bits=s.bits)
        net.flush()
    return p[0, 0] ^ p[0, 1] ^ p[1, 1]


def peek_bool(s: BoolShare) -> np.ndarray:
    return s.pairs[0, 0] ^ s.pairs[0, 1] ^ s.pairs[1, 1]


def fresh_bool(net: PartyNet, value: np.ndarray, bits: int) -> BoolShare:
    """Dealer-style fresh boolean sharing (used by the ideal backend; no cost)."""
    v = ring.as_ring(np.asarray(value))
    r = net.dealer_random((2,) + v.shape)
    comp = np.stack([r[0], r[1], v ^ r[0] ^ r[1]])
    return bool_from_components(comp, bits)


def fresh_arith(net: PartyNet, value: np.ndarray, frac: int = 0) -> ShareTensor:
    v = ring.as_ring(np.asarray(value))
    r = net.dealer_random((2,) + v.shape)
    comp = np.stack([r[0], r[1], v - r[0] - r[1]])
    return ShareTensor(_pairs_from_components(comp), frac)

