"""2-D binarized convolution (XNOR + popcount) and its full-precision reference."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .binarize import BinaryConvParams
from .errors import GeometryMismatch
from .tensor import BitTensor, bit_pack, bit_unpack, tail_mask


@dataclass(frozen=True)
class ConvGeometry:
    c_in: int
    c_out: int
    k: int
    stride: int
    padding: int
    h: int
    w: int

    def __post_init__(self):
        if self.k not in (1, 3):
            raise GeometryMismatch(f"kernel size must be 1 or 3, got {self.k}")
        if self.stride not in (1, 2):
            raise GeometryMismatch(f"stride must be 1 or 2, got {self.stride}")
        if min(self.c_in, self.c_out, self.h, self.w) < 1 or self.padding < 0:
            raise GeometryMismatch(f"invalid geometry {self}")
        if self.h_out < 1 or self.w_out < 1:
            raise GeometryMismatch(f"{self} produces an empty output")

    @classmethod
    def same(cls, c_in: int, c_out: int, k: int, h: int, w: int, stride: int = 1):
        return cls(c_in, c_out, k, stride, k // 2, h, w)

    @property
    def h_out(self) -> int:
        return (self.h + 2 * self.padding - self.k) // self.stride + 1

    @property
    def w_out(self) -> int:
        return (self.w + 2 * self.padding - self.k) // self.stride + 1

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.c_out, self.c_in, self.k, self.k)

    @property
    def out_shape(self) -> tuple[int, int, int]:
        return (self.c_out, self.h_out, self.w_out)

    def check_input(self, shape) -> None:
        if tuple(shape[-3:]) != (self.c_in, self.h, self.w) or len(shape) not in (3, 4):
            raise GeometryMismatch(f"input shape {tuple(shape)} does not fit {self}")

    def check_weights(self, shape) -> None:
        if tuple(shape) != self.weight_shape:
            raise GeometryMismatch(f"weight shape {tuple(shape)} != {self.weight_shape}")


def pad_spatial(x: np.ndarray, pad: int, value=0) -> np.ndarray:
    if pad == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    return np.pad(x, widths, constant_values=value)


def conv2d_fp(x, w, g: ConvGeometry, pad_value: float = 0.0) -> np.ndarray:
    """Cross-correlation of (C_in,H,W) or (N,C_in,H,W) input, no bias."""
    x = np.asarray(x)
    w = np.asarray(w)
    g.check_input(x.shape)
    g.check_weights(w.shape)
    xp = pad_spatial(x, g.padding, pad_value)
    s, ho, wo = g.stride, g.h_out, g.w_out
    dtype = np.result_type(x, w)
    out = np.zeros(x.shape[:-3] + g.out_shape, dtype=dtype)
    for m in range(g.k):
        for n in range(g.k):
            patch = xp[..., m : m + s * (ho - 1) + 1 : s, n : n + s * (wo - 1) + 1 : s]
            out += np.einsum("oc,...chw->...ohw", w[:, :, m, n], patch)
    return out


def conv2d_bit(xb: BitTensor, params: BinaryConvParams, g: ConvGeometry) -> np.ndarray:
    """Binarized conv on packed activations, padding bits read as -1.

    Each output is ``scale * (2 * matches - k*k*C_in)`` where ``matches``
    counts agreeing bits over the window; accumulation is integer.
    """
    g.check_input(xb.shape)
    g.check_weights(params.latent_weights.shape)
    signs = params.packed_signs
    if xb.axis != len(xb.shape) - 3 or signs.axis != 1:
        raise GeometryMismatch("activations and weights must be packed along channels")
    # words: x (..., H, W, nw); w (C_out, k, k, nw)
    xw = xb.words
    if g.padding:
        widths = [(0, 0)] * (xw.ndim - 3) + [(g.padding, g.padding)] * 2 + [(0, 0)]
        xw = np.pad(xw, widths)  # 0 bits are -1
    mask = tail_mask(g.c_in)
    s, ho, wo = g.stride, g.h_out, g.w_out
    matches = np.zeros(xw.shape[:-3] + (g.c_out, ho, wo), dtype=np.int32)
    for m in range(g.k):
        for n in range(g.k):
            win = xw[..., m : m + s * (ho - 1) + 1 : s, n : n + s * (wo - 1) + 1 : s, :]
            wk = signs.words[:, m, n, :]  # (C_out, nw)
            same = ~(win[..., None, :, :, :] ^ wk[:, None, None, :]) & mask
            matches += np.bitwise_count(same).sum(axis=-1, dtype=np.int32)
    total = 2 * matches - g.k * g.k * g.c_in
    dtype = params.latent_weights.dtype
    return total.astype(dtype) * dtype.type(params.scale)


def check_equivalence(g: ConvGeometry, seed: int = 0, batch: int | None = None) -> float:
    """Max abs deviation between the packed kernel and the fp reference."""
    rng = np.random.default_rng(seed)
    shape = (g.c_in, g.h, g.w) if batch is None else (batch, g.c_in, g.h, g.w)
    x = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    params = BinaryConvParams(rng.standard_normal(g.weight_shape))
    xb = bit_pack(x)
    got = conv2d_bit(xb, params, g)
    ref = conv2d_fp(bit_unpack(xb), bit_unpack(params.packed_signs), g, pad_value=-1.0)
    want = ref * params.scale
    return float(np.max(np.abs(got - want)))
