"""BDC units (V0-V3) and the four shape-changing convolution modules.

A conv stage is ``redistribute -> sign -> binarized conv -> BatchNorm -> RPReLU``.

* V0: one k x k stage.
* V1: one stage per entry of the kernel plan (default 3x3 then 1x1).
* V2: V1 followed by MulBiconv_N.
* V3: V1 whose last stage output X1 is gated per channel by
  ``sigmoid(MulBiconv_N(avgpool(X1)))``.

Every unit adds a full-precision residual.  Modules change shape as follows:
DownSample runs two stride-2 first stages side by side and concatenates them
(residual: 2x2 average pool, duplicated along channels); UpSample upsamples
by nearest neighbour and runs a Basic unit on the result; ChannelReduce maps
C -> C/2 in the first stage (residual: mean of channel pairs).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import INFERENCE, Ctx
from .binarize import BinaryConvParams, RedistParams, _param
from .bitconv import ConvGeometry
from .errors import (
    ChannelMismatch,
    IndivisibleShape,
    KernelNotOne,
    ShapeMismatch,
    StackLengthMismatch,
)
from .tensor import channel_axis


class Variant(str, enum.Enum):
    V0 = "V0"
    V1 = "V1"
    V2 = "V2"
    V3 = "V3"


class ModuleKind(str, enum.Enum):
    BASIC = "Basic"
    DOWNSAMPLE = "DownSample"
    UPSAMPLE = "UpSample"
    CHANNEL_REDUCE = "ChannelReduce"

    def out_shape(self, c: int, h: int, w: int) -> tuple[int, int, int]:
        if self is ModuleKind.DOWNSAMPLE:
            if h % 2 or w % 2:
                raise IndivisibleShape(f"DownSample needs even H, W, got {(h, w)}")
            return 2 * c, h // 2, w // 2
        if self is ModuleKind.UPSAMPLE:
            return c, 2 * h, 2 * w
        if self is ModuleKind.CHANNEL_REDUCE:
            if c % 2:
                raise IndivisibleShape(f"ChannelReduce needs even C, got {c}")
            return c // 2, h, w
        return c, h, w


@dataclass(frozen=True)
class BDCUnitConfig:
    variant: Variant = Variant.V3
    n_mulbiconv: int = 2
    channels: int = 8
    kernels: tuple[int, ...] = (3, 1)
    binarized: bool = True

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        if self.n_mulbiconv < 0:
            raise ValueError("n_mulbiconv must be >= 0")
        if not self.kernels or any(k not in (1, 3) for k in self.kernels):
            raise ValueError(f"kernel plan entries must be 1 or 3, got {self.kernels}")
        if self.variant is not Variant.V0 and len(self.kernels) < 2:
            raise ValueError(f"{self.variant.value} needs at least two kernels")

    @property
    def first_kernel(self) -> int:
        return self.kernels[0]

    @property
    def second_kernel(self) -> int | None:
        return self.kernels[1] if len(self.kernels) > 1 else None

    @property
    def stage_kernels(self) -> tuple[int, ...]:
        return self.kernels[:1] if self.variant is Variant.V0 else self.kernels

    @property
    def mul_depth(self) -> int:
        return self.n_mulbiconv if self.variant is Variant.V2 else 0

    @property
    def gate_depth(self) -> int | None:
        return self.n_mulbiconv if self.variant is Variant.V3 else None

    def replace(self, **kw) -> BDCUnitConfig:
        from dataclasses import replace

        return replace(self, **kw)


# ---------------------------------------------------------------------------
# parameters

@dataclass
class RPReLUParams:
    beta: np.ndarray = _param()
    gamma: np.ndarray = _param()
    zeta: np.ndarray = _param()

    @classmethod
    def init(cls, channels: int, dtype=np.float32) -> RPReLUParams:
        return cls(
            np.full(channels, 0.25, dtype), np.zeros(channels, dtype), np.zeros(channels, dtype)
        )


@dataclass
class BatchNormParams:
    weight: np.ndarray = _param()
    bias: np.ndarray = _param()
    running_mean: np.ndarray = None
    running_var: np.ndarray = None

    @classmethod
    def init(cls, channels: int, dtype=np.float32) -> BatchNormParams:
        return cls(
            np.ones(channels, dtype),
            np.zeros(channels, dtype),
            np.zeros(channels, dtype),
            np.ones(channels, dtype),
        )


@dataclass
class ConvStage:
    redist: RedistParams
    conv: BinaryConvParams
    bn: BatchNormParams
    act: RPReLUParams
    geometry: ConvGeometry = field(metadata={"static": True})


@dataclass
class MulBiconvLayer:
    act: RPReLUParams
    redist: RedistParams
    conv: BinaryConvParams


@dataclass
class BDCUnitParams:
    first: list[ConvStage]
    rest: list[ConvStage]
    mul: list[MulBiconvLayer]
    gate: list[MulBiconvLayer] | None


def kaiming(rng, shape, dtype=np.float32) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def make_stage(rng, c_in, c_out, k, h, w, stride=1, dtype=np.float32) -> ConvStage:
    g = ConvGeometry(c_in, c_out, k, stride, k // 2, h, w)
    return ConvStage(
        RedistParams.identity(c_in, dtype),
        BinaryConvParams(kaiming(rng, g.weight_shape, dtype)),
        BatchNormParams.init(c_out, dtype),
        RPReLUParams.init(c_out, dtype),
        g,
    )


def make_mulbiconv(rng, channels: int, n: int, dtype=np.float32) -> list[MulBiconvLayer]:
    return [
        MulBiconvLayer(
            RPReLUParams.init(channels, dtype),
            RedistParams.identity(channels, dtype),
            BinaryConvParams(kaiming(rng, (channels, channels, 1, 1), dtype)),
        )
        for _ in range(n)
    ]


def init_unit(cfg: BDCUnitConfig, h: int, w: int, kind: ModuleKind = ModuleKind.BASIC,
              seed=0, dtype=np.float32) -> BDCUnitParams:
    """Fresh parameters for a unit of ``cfg`` wrapped in module ``kind``.

    ``h, w`` is the module input size; ``seed`` may be an int or a Generator.
    """
    rng = np.random.default_rng(seed)
    c = cfg.channels
    kinds = cfg.stage_kernels
    k0 = kinds[0]
    if kind is ModuleKind.DOWNSAMPLE:
        kind.out_shape(c, h, w)
        first = [make_stage(rng, c, c, k0, h, w, 2, dtype) for _ in range(2)]
        c_mid, h_mid, w_mid = 2 * c, h // 2, w // 2
    elif kind is ModuleKind.CHANNEL_REDUCE:
        kind.out_shape(c, h, w)
        first = [make_stage(rng, c, c // 2, k0, h, w, 1, dtype)]
        c_mid, h_mid, w_mid = c // 2, h, w
    else:
        if kind is ModuleKind.UPSAMPLE:
            h, w = 2 * h, 2 * w
        first = [make_stage(rng, c, c, k0, h, w, 1, dtype)]
        c_mid, h_mid, w_mid = c, h, w
    rest = [make_stage(rng, c_mid, c_mid, k, h_mid, w_mid, 1, dtype) for k in kinds[1:]]
    mul = make_mulbiconv(rng, c_mid, cfg.mul_depth, dtype)
    gate = None if cfg.gate_depth is None else make_mulbiconv(rng, c_mid, cfg.gate_depth, dtype)
    return BDCUnitParams(first, rest, mul, gate)


# ---------------------------------------------------------------------------
# forward ops

def rprelu(y, p: RPReLUParams, ctx: Ctx = INFERENCE):
    """(y - gamma) + zeta above gamma, beta * (y - gamma) + zeta at or below."""
    return ag.rprelu(np.asarray(y), p.beta, p.gamma, p.zeta, ctx)


def stage_forward(x, st: ConvStage, ctx: Ctx = INFERENCE, binarized=True):
    conv = st.conv
    h = ag.redistribute(x, st.redist.k, st.redist.b, ctx)
    if binarized:
        h = ag.binarize_act(h, conv.alpha, ctx)
    h = ag.binary_conv(h, conv, st.geometry, ctx, binarized)
    bn = st.bn
    h = ag.batchnorm(h, bn.weight, bn.bias, bn.running_mean, bn.running_var, ctx)
    return ag.rprelu(h, st.act.beta, st.act.gamma, st.act.zeta, ctx)


def mulbiconv(x, stack: list[MulBiconvLayer], n: int, ctx: Ctx = INFERENCE, binarized=True):
    """N repeats of [RPReLU -> redistribute -> sign -> 1x1 binarized conv]."""
    x = np.asarray(x)
    if len(stack) != n:
        raise StackLengthMismatch(f"stack has {len(stack)} layers, expected {n}")
    c = x.shape[channel_axis(x.ndim)]
    for layer in stack:
        w = layer.conv.latent_weights
        if w.shape[2:] != (1, 1):
            raise KernelNotOne(f"MulBiconv layers must be 1x1, got {w.shape[2:]}")
        if w.shape[:2] != (c, c):
            raise ChannelMismatch(f"MulBiconv conv {w.shape[:2]} on {c} channels")
    for layer in stack:
        g = ConvGeometry(c, c, 1, 1, 0, x.shape[-2], x.shape[-1])
        x = ag.rprelu(x, layer.act.beta, layer.act.gamma, layer.act.zeta, ctx)
        x = ag.redistribute(x, layer.redist.k, layer.redist.b, ctx)
        if binarized:
            x = ag.binarize_act(x, layer.conv.alpha, ctx)
        x = ag.binary_conv(x, layer.conv, g, ctx, binarized)
    return x


def channel_weight_branch(x1, branch: list[MulBiconvLayer], n: int, ctx: Ctx = INFERENCE,
                          binarized=True):
    """``sigmoid(MulBiconv_N(avgpool(x1))) * x1`` with a per-channel gate."""
    x1 = np.asarray(x1)
    c = x1.shape[channel_axis(x1.ndim)]
    for layer in branch:
        if layer.conv.latent_weights.shape[:2] != (c, c):
            raise ChannelMismatch(f"gate branch conv does not act on {c} channels")
    pooled = ag.spatial_mean(x1, ctx)
    gate = ag.sigmoid(mulbiconv(pooled, branch, n, ctx, binarized), ctx)
    return ag.mul(gate, x1, ctx)


def _residual(x, kind: ModuleKind, ctx: Ctx):
    if kind is ModuleKind.DOWNSAMPLE:
        pooled = ag.avgpool2(x, ctx)
        return ag.concat([pooled, pooled], channel_axis(x.ndim), ctx)
    if kind is ModuleKind.CHANNEL_REDUCE:
        return ag.channel_pair_mean(x, ctx)
    return x


def module_forward(x, kind: ModuleKind, cfg: BDCUnitConfig, params: BDCUnitParams,
                   ctx: Ctx = INFERENCE):
    """One BDC unit wrapped in the shape contract of ``kind``."""
    x = np.asarray(x)
    kind = ModuleKind(kind)
    ax = channel_axis(x.ndim)
    if x.ndim not in (3, 4) or x.shape[ax] != cfg.channels:
        raise ShapeMismatch(f"input {x.shape} does not have {cfg.channels} channels")
    want = kind.out_shape(cfg.channels, x.shape[-2], x.shape[-1])
    b = cfg.binarized
    if kind is ModuleKind.UPSAMPLE:
        x = ag.upsample2(x, ctx)
    if kind is ModuleKind.DOWNSAMPLE:
        h = ag.concat([stage_forward(x, st, ctx, b) for st in params.first], ax, ctx)
    else:
        h = stage_forward(x, params.first[0], ctx, b)
    for st in params.rest:
        h = stage_forward(h, st, ctx, b)
    if cfg.variant is Variant.V2:
        h = mulbiconv(h, params.mul, cfg.n_mulbiconv, ctx, b)
    elif cfg.variant is Variant.V3:
        h = channel_weight_branch(h, params.gate, cfg.n_mulbiconv, ctx, b)
    out = ag.add(h, _residual(x, kind, ctx), ctx)
    if out.shape[ax:] != want:
        raise ShapeMismatch(f"{kind.value} produced {out.shape[ax:]}, expected {want}")
    return out


def bdc_forward(x, cfg: BDCUnitConfig, params: BDCUnitParams, ctx: Ctx = INFERENCE):
    """Basic-shaped BDC unit: ``branch(x) + x``."""
    return module_forward(x, ModuleKind.BASIC, cfg, params, ctx)
