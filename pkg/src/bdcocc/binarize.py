"""Scalar binarization math: redistribution, sign, tanh surrogate, weight signs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ChannelMismatch, EmptyTensor, NonPositiveAlpha, ShapeMismatch
from .tensor import BitTensor, bit_pack, channel_axis


def _param(**kw):
    return field(metadata={"trainable": True}, **kw)


@dataclass
class RedistParams:
    """Per-channel affine ``k * x + b`` applied before binarization."""

    k: np.ndarray = _param()
    b: np.ndarray = _param()

    @classmethod
    def identity(cls, channels: int, dtype=np.float32) -> RedistParams:
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype))


@dataclass
class BinaryConvParams:
    """Latent weights of a binarized conv plus the derived scale and sign bits.

    ``scale`` and ``packed_signs`` are caches: call :meth:`refresh` whenever
    ``latent_weights`` changes.  Between refreshes the scale acts as a
    detached constant.
    """

    latent_weights: np.ndarray = _param()
    alpha: float = 1.0
    scale: float = 0.0
    packed_signs: BitTensor | None = None

    def __post_init__(self):
        if self.alpha <= 0:
            raise NonPositiveAlpha(f"alpha must be > 0, got {self.alpha}")
        if self.packed_signs is None:
            self.refresh()

    def refresh(self) -> None:
        self.scale, self.packed_signs = binarize_weights(self.latent_weights)

    @property
    def signs(self) -> np.ndarray:
        return sign_forward(self.latent_weights)

    @property
    def effective_weights(self) -> np.ndarray:
        w = self.latent_weights
        return (w.dtype.type(self.scale) * sign_forward(w)).astype(w.dtype)


def redistribute(x, p: RedistParams) -> np.ndarray:
    """``k[c] * x[c] + b[c]`` over the channel axis of (C,H,W) or (N,C,H,W)."""
    x = np.asarray(x)
    ax = channel_axis(x.ndim)
    if p.k.shape != (x.shape[ax],) or p.b.shape != (x.shape[ax],):
        raise ChannelMismatch(
            f"redistribution params of length {p.k.shape}/{p.b.shape} for {x.shape[ax]} channels"
        )
    bshape = (-1,) + (1,) * (x.ndim - ax - 1)
    return p.k.reshape(bshape) * x + p.b.reshape(bshape)


def sign_forward(x) -> np.ndarray:
    """+1 where x > 0, -1 elsewhere (zero maps to -1)."""
    x = np.asarray(x)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    return np.where(x > 0, 1, -1).astype(dtype)


def tanh_surrogate(x, alpha: float = 1.0):
    """Return ``tanh(alpha*x)`` and its derivative with respect to x."""
    if not alpha > 0:
        raise NonPositiveAlpha(f"alpha must be > 0, got {alpha}")
    t = np.tanh(alpha * np.asarray(x))
    return t, alpha * (1 - t * t)


def binarize_weights(w) -> tuple[float, BitTensor]:
    """Layer scale ``mean(|w|)`` and the packed signs of ``w``.

    An all-zero tensor is legal: the scale is 0 and every sign is -1.
    """
    w = np.asarray(w)
    if w.size == 0:
        raise EmptyTensor("cannot binarize an empty weight tensor")
    scale = float(np.mean(np.abs(w), dtype=np.float64))
    return scale, bit_pack(sign_forward(w))


def weight_ste_grad(upstream, params: BinaryConvParams) -> np.ndarray:
    """Clipped straight-through gradient for the latent weights.

    d(loss)/d(w) = upstream * scale * 1{|w| <= 1}, with the scale held fixed.
    """
    upstream = np.asarray(upstream)
    w = params.latent_weights
    if upstream.shape != w.shape:
        raise ShapeMismatch(f"gradient shape {upstream.shape} != weight shape {w.shape}")
    inside = (np.abs(w) <= 1).astype(upstream.dtype)
    return upstream * upstream.dtype.type(params.scale) * inside
