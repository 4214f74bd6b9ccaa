"""Dense and bit-packed tensors.

Dense tensors are plain numpy float arrays (float32 on training paths,
float64 for verification).  Binary tensors hold one bit per element in
64-bit words: bit value 1 is +1 and 0 is -1, filled LSB-first.

Bits are packed along the *channel* axis, which is moved innermost before
packing: axis 0 for (C, H, W), axis 1 for (N, C, H, W) activations and
(C_out, C_in, k, k) weights, and the last axis for rank 1 and 2.  The word
array therefore has shape ``other_dims + (n_words,)`` and every row carries
the same number of valid bits in its final word.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import LengthMismatch, NonBinaryValue, ShapeMismatch

WORD_BITS = 64
WORD_DTYPE = np.dtype("<u8")


class Shape(tuple):
    """Tuple of 1 to 4 positive dims."""

    def __new__(cls, dims):
        dims = tuple(int(d) for d in dims)
        if not 1 <= len(dims) <= 4:
            raise ShapeMismatch(f"rank must be 1..4, got {len(dims)}")
        if any(d < 1 for d in dims):
            raise ShapeMismatch(f"all dims must be >= 1, got {dims}")
        return super().__new__(cls, dims)

    @property
    def size(self) -> int:
        n = math.prod(self)
        # numpy indexes with int64
        if n >= 2**63:
            raise OverflowError(f"element count of {tuple(self)} overflows")
        return n


def channel_axis(rank: int) -> int:
    return rank - 3 if rank >= 3 else rank - 1


def n_words(n_bits: int) -> int:
    return (n_bits + WORD_BITS - 1) // WORD_BITS


def tail_mask(n_bits: int) -> np.ndarray:
    """Per-word validity masks for a row of ``n_bits`` bits."""
    nw = n_words(n_bits)
    mask = np.full(nw, np.iinfo(np.uint64).max, dtype=WORD_DTYPE)
    tail = n_bits - (nw - 1) * WORD_BITS
    if tail < WORD_BITS:
        mask[-1] = np.uint64((1 << tail) - 1)
    return mask


@dataclass(frozen=True, eq=False)
class BitTensor:
    shape: Shape
    words: np.ndarray
    axis: int

    @property
    def n_bits(self) -> int:
        """Valid bits per packed row (the channel count)."""
        return self.shape[self.axis]

    @property
    def n_valid_tail(self) -> int:
        return self.n_bits - (self.words.shape[-1] - 1) * WORD_BITS

    def __eq__(self, other):
        if not isinstance(other, BitTensor):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.axis == other.axis
            and np.array_equal(self.words, other.words)
        )

    __hash__ = None


def check_fp(x, name: str = "tensor") -> np.ndarray:
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains NaN or Inf")
    return x


def bit_pack(t, axis: int | None = None) -> BitTensor:
    """Pack a tensor of exact +-1 values."""
    t = np.asarray(t)
    shape = Shape(t.shape)
    if not np.all((t == 1) | (t == -1)):
        raise NonBinaryValue("bit_pack needs every element to be exactly -1 or +1")
    if axis is None:
        axis = channel_axis(len(shape))
    rows = np.moveaxis(t, axis, -1) == 1
    n = rows.shape[-1]
    pad = n_words(n) * WORD_BITS - n
    if pad:
        rows = np.concatenate([rows, np.zeros(rows.shape[:-1] + (pad,), bool)], axis=-1)
    packed = np.packbits(rows, axis=-1, bitorder="little")
    words = np.ascontiguousarray(packed).view(WORD_DTYPE)
    return BitTensor(shape, words, axis)


def bit_unpack(b: BitTensor, dtype=np.float64) -> np.ndarray:
    raw = np.ascontiguousarray(b.words).view(np.uint8)
    bits = np.unpackbits(raw, axis=-1, bitorder="little")[..., : b.n_bits]
    vals = np.where(bits == 1, 1.0, -1.0).astype(dtype)
    return np.moveaxis(vals, -1, b.axis)


def popcount_dot(a, b, n: int) -> int:
    """Integer dot product of two packed +-1 vectors of ``n`` valid bits."""
    a = np.asarray(a, dtype=WORD_DTYPE)
    b = np.asarray(b, dtype=WORD_DTYPE)
    if a.shape != b.shape or a.shape[-1] != n_words(n):
        raise LengthMismatch(f"packed lengths {a.shape}, {b.shape} do not hold {n} bits")
    # XNOR turns zero padding into ones, so mask after it
    same = ~(a ^ b) & tail_mask(n)
    return 2 * int(np.bitwise_count(same).sum()) - n
