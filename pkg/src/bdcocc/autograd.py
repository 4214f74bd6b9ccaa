"""Tape-based reverse-mode differentiation for the library's op set.

Every differentiable primitive takes a :class:`Ctx`.  With ``ctx.tape`` unset
it is a plain numpy forward; with a tape it also records a vector-Jacobian
closure.  Composite layers are written once against these primitives, so
the recorded forward is bitwise identical to the plain one.

Gradients are keyed by ``id`` of the arrays involved.  The tape holds a
reference to every recorded input and output, which keeps those ids unique
for its lifetime.

Binarization modes:

* hard (default): activations go through ``sign`` and binarized convs run
  the packed XNOR/popcount kernel; backward uses the tanh derivative at the
  saved pre-activation and the clipped weight estimator.
* surrogate: ``tanh(alpha*x)`` replaces sign and ``scale*clip(w, -1, 1)``
  replaces ``scale*sign(w)``, so the network is an ordinary differentiable
  function.  Its activation and weight rules are the ones hard mode uses;
  only the forward values differ.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .binarize import BinaryConvParams, sign_forward, tanh_surrogate, weight_ste_grad
from .bitconv import ConvGeometry, conv2d_bit, conv2d_fp, pad_spatial
from .errors import ChannelMismatch, ShapeMismatch, TapeMismatch
from .tensor import bit_pack, channel_axis


@dataclass
class _Node:
    out: np.ndarray
    inputs: tuple
    params: tuple
    vjp: Callable


class Tape:
    def __init__(self):
        self.nodes: list[_Node] = []
        self.output: np.ndarray | None = None

    def record(self, out, inputs, vjp, params=()):
        self.nodes.append(_Node(out, tuple(inputs), tuple(params), vjp))

    def touched_params(self) -> dict[int, np.ndarray]:
        return {id(p): p for node in self.nodes for p in node.params}

    def __len__(self):
        return len(self.nodes)


@dataclass
class Ctx:
    tape: Tape | None = None
    training: bool = False
    surrogate: bool = False


INFERENCE = Ctx()


# ---------------------------------------------------------------------------
# parameter trees

def is_trainable(f: dataclasses.Field) -> bool:
    return bool(f.metadata.get("trainable"))


def named_parameters(tree, prefix: str = "") -> dict[str, np.ndarray]:
    """Trainable arrays of a nested dataclass/list/dict tree, by dotted name."""
    out: dict[str, np.ndarray] = {}
    if isinstance(tree, dict) and all(isinstance(v, np.ndarray) for v in tree.values()):
        return {prefix + k: v for k, v in tree.items()}
    _walk(tree, prefix.rstrip("."), out)
    return out


def _walk(obj, name, out):
    join = (lambda s: f"{name}.{s}") if name else str
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            val = getattr(obj, f.name)
            if is_trainable(f) and isinstance(val, np.ndarray):
                out[join(f.name)] = val
            elif _container(val):
                _walk(val, join(f.name), out)
    elif isinstance(obj, (list, tuple)):
        for i, val in enumerate(obj):
            if _container(val):
                _walk(val, join(str(i)), out)
    elif isinstance(obj, dict):
        for key, val in obj.items():
            if _container(val):
                _walk(val, join(str(key)), out)


def _container(val) -> bool:
    return (dataclasses.is_dataclass(val) and not isinstance(val, type)) or isinstance(
        val, (list, tuple, dict)
    )


def binary_convs(tree) -> list[BinaryConvParams]:
    found: list[BinaryConvParams] = []

    def visit(obj):
        if isinstance(obj, BinaryConvParams):
            found.append(obj)
        elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            for f in dataclasses.fields(obj):
                visit(getattr(obj, f.name))
        elif isinstance(obj, (list, tuple)):
            for v in obj:
                visit(v)
        elif isinstance(obj, dict):
            for v in obj.values():
                visit(v)

    visit(tree)
    return found


# ---------------------------------------------------------------------------
# helpers

def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _chan(x: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """Reshape a per-channel vector to broadcast against x."""
    ax = channel_axis(x.ndim)
    if vec.shape != (x.shape[ax],):
        raise ChannelMismatch(f"per-channel vector {vec.shape} for {x.shape[ax]} channels")
    return vec.reshape((-1,) + (1,) * (x.ndim - ax - 1))


def _reduce_axes(x: np.ndarray) -> tuple[int, ...]:
    ax = channel_axis(x.ndim)
    return tuple(i for i in range(x.ndim) if i != ax)


def conv_grad_input(gout, w, g: ConvGeometry) -> np.ndarray:
    s, p = g.stride, g.padding
    ho, wo = g.h_out, g.w_out
    gx = np.zeros(gout.shape[:-3] + (g.c_in, g.h + 2 * p, g.w + 2 * p), dtype=gout.dtype)
    for m in range(g.k):
        for n in range(g.k):
            gx[..., m : m + s * (ho - 1) + 1 : s, n : n + s * (wo - 1) + 1 : s] += np.einsum(
                "oc,...ohw->...chw", w[:, :, m, n], gout
            )
    return gx[..., p : p + g.h, p : p + g.w]


def conv_grad_weight(x, gout, g: ConvGeometry, pad_value=0.0) -> np.ndarray:
    hp, wp = g.h + 2 * g.padding, g.w + 2 * g.padding
    xp = pad_spatial(x, g.padding, pad_value).reshape(-1, g.c_in, hp, wp)
    gout = gout.reshape((-1,) + g.out_shape)
    s, ho, wo = g.stride, g.h_out, g.w_out
    gw = np.zeros(g.weight_shape, dtype=gout.dtype)
    for m in range(g.k):
        for n in range(g.k):
            patch = xp[..., m : m + s * (ho - 1) + 1 : s, n : n + s * (wo - 1) + 1 : s]
            gw[:, :, m, n] = np.einsum("bohw,bchw->oc", gout, patch)
    return gw


# ---------------------------------------------------------------------------
# primitives

def redistribute(x, k, b, ctx: Ctx = INFERENCE):
    out = _chan(x, k) * x + _chan(x, b)
    if ctx.tape is not None:
        axes = _reduce_axes(x)

        def vjp(g):
            return (g * _chan(x, k),), ((g * x).sum(axis=axes), g.sum(axis=axes))

        ctx.tape.record(out, (x,), vjp, (k, b))
    return out


def binarize_act(x, alpha: float = 1.0, ctx: Ctx = INFERENCE):
    """sign(x) in hard mode, tanh(alpha*x) in surrogate mode."""
    t, dt = tanh_surrogate(x, alpha)
    out = t.astype(x.dtype) if ctx.surrogate else sign_forward(x)
    if ctx.tape is not None:
        ctx.tape.record(out, (x,), lambda g: ((g * dt).astype(g.dtype),), ())
    return out


def binary_conv(x, conv: BinaryConvParams, g: ConvGeometry, ctx: Ctx = INFERENCE, binarized=True):
    """Binarized conv (pads with -1) or, with ``binarized=False``, a plain conv on
    the latent weights (pads with 0)."""
    w = conv.latent_weights
    if not binarized:
        out = conv2d_fp(x, w, g)
        pad_value, w_eff = 0.0, w
    elif ctx.surrogate:
        w_eff = (w.dtype.type(conv.scale) * np.clip(w, -1, 1)).astype(w.dtype)
        pad_value = -1.0
        out = conv2d_fp(x, w_eff, g, pad_value)
    else:
        pad_value, w_eff = -1.0, None
        out = conv2d_bit(bit_pack(x), conv, g)
    if ctx.tape is not None:

        def vjp(gout):
            weff = conv.effective_weights if w_eff is None else w_eff
            gx = conv_grad_input(gout, weff, g)
            gw = conv_grad_weight(x, gout, g, pad_value)
            if binarized:
                gw = weight_ste_grad(gw, conv)
            return (gx,), (gw,)

        ctx.tape.record(out, (x,), vjp, (w,))
    return out


def fp_conv(x, w, bias, g: ConvGeometry, ctx: Ctx = INFERENCE):
    out = conv2d_fp(x, w, g)
    if bias is not None:
        out = out + _chan(out, bias)
    if ctx.tape is not None:
        params = (w,) if bias is None else (w, bias)

        def vjp(gout):
            gw = conv_grad_weight(x, gout, g)
            pg = (gw,) if bias is None else (gw, gout.sum(axis=_reduce_axes(gout)))
            return (conv_grad_input(gout, w, g),), pg

        ctx.tape.record(out, (x,), vjp, params)
    return out


def batchnorm(x, weight, bias, running_mean, running_var, ctx: Ctx = INFERENCE,
              momentum: float = 0.1, eps: float = 1e-5):
    """Per-channel batch norm; batch statistics (and running-stat updates) in training."""
    axes = _reduce_axes(x)
    if ctx.training:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        count = x.size // x.shape[channel_axis(x.ndim)]
        unbiased = var * count / max(count - 1, 1)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x - _chan(x, mean.astype(x.dtype))) * _chan(x, inv)
    out = xhat * _chan(x, weight) + _chan(x, bias)
    if ctx.tape is not None:
        training = ctx.training

        def vjp(g):
            pg = ((g * xhat).sum(axis=axes), g.sum(axis=axes))
            dxhat = g * _chan(x, weight)
            if not training:
                return (dxhat * _chan(x, inv),), pg
            m = x.size // x.shape[channel_axis(x.ndim)]
            s1 = dxhat.sum(axis=axes)
            s2 = (dxhat * xhat).sum(axis=axes)
            gx = (dxhat - _chan(x, s1) / m - xhat * _chan(x, s2) / m) * _chan(x, inv)
            return (gx,), pg

        ctx.tape.record(out, (x,), vjp, (weight, bias))
    return out


def rprelu(y, beta, gamma, zeta, ctx: Ctx = INFERENCE):
    shifted = y - _chan(y, gamma)
    above = shifted > 0
    slope = np.where(above, y.dtype.type(1), _chan(y, beta))
    out = slope * shifted + _chan(y, zeta)
    if ctx.tape is not None:
        axes = _reduce_axes(y)

        def vjp(g):
            gslope = g * slope
            return (gslope,), (
                np.where(above, 0, g * shifted).sum(axis=axes),
                -gslope.sum(axis=axes),
                g.sum(axis=axes),
            )

        ctx.tape.record(out, (y,), vjp, (beta, gamma, zeta))
    return out


def sigmoid(x, ctx: Ctx = INFERENCE):
    out = 0.5 * (np.tanh(0.5 * x) + 1)
    if ctx.tape is not None:
        ctx.tape.record(out, (x,), lambda g: (g * out * (1 - out),))
    return out


def spatial_mean(x, ctx: Ctx = INFERENCE):
    """Global average pool over the last two axes, keeping them as size 1."""
    out = x.mean(axis=(-2, -1), keepdims=True)
    if ctx.tape is not None:
        hw = x.shape[-2] * x.shape[-1]
        ctx.tape.record(out, (x,), lambda g: (np.broadcast_to(g / hw, x.shape).copy(),))
    return out


def add(a, b, ctx: Ctx = INFERENCE):
    out = a + b
    if ctx.tape is not None:
        ctx.tape.record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def mul(a, b, ctx: Ctx = INFERENCE):
    out = a * b
    if ctx.tape is not None:
        ctx.tape.record(
            out, (a, b), lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))
        )
    return out


def concat(xs, axis: int, ctx: Ctx = INFERENCE):
    out = np.concatenate(xs, axis=axis)
    if ctx.tape is not None:
        bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
        ctx.tape.record(out, tuple(xs), lambda g: tuple(np.split(g, bounds, axis=axis)))
    return out


def avgpool2(x, ctx: Ctx = INFERENCE):
    h, w = x.shape[-2], x.shape[-1]
    if h % 2 or w % 2:
        raise ShapeMismatch(f"avgpool2 needs even spatial dims, got {(h, w)}")
    out = x.reshape(x.shape[:-2] + (h // 2, 2, w // 2, 2)).mean(axis=(-3, -1))
    if ctx.tape is not None:
        ctx.tape.record(out, (x,), lambda g: (np.repeat(np.repeat(g, 2, -2), 2, -1) / 4,))
    return out


def upsample2(x, ctx: Ctx = INFERENCE, axes=(-2, -1)):
    """Nearest-neighbour 2x along the given axes."""
    out = x
    for ax in axes:
        out = np.repeat(out, 2, axis=ax)
    if ctx.tape is not None:

        def vjp(g):
            for ax in axes:
                ax = ax % g.ndim
                shape = g.shape[:ax] + (g.shape[ax] // 2, 2) + g.shape[ax + 1 :]
                g = g.reshape(shape).sum(axis=ax + 1)
            return (g,)

        ctx.tape.record(out, (x,), vjp)
    return out


def channel_pair_mean(x, ctx: Ctx = INFERENCE):
    ax = channel_axis(x.ndim)
    c = x.shape[ax]
    if c % 2:
        raise ShapeMismatch(f"channel_pair_mean needs an even channel count, got {c}")
    shape = x.shape[:ax] + (c // 2, 2) + x.shape[ax + 1 :]
    out = x.reshape(shape).mean(axis=ax + 1)
    if ctx.tape is not None:
        ctx.tape.record(out, (x,), lambda g: (np.repeat(g, 2, axis=ax) / 2,))
    return out


def select(x, index: int, axis: int = 0, ctx: Ctx = INFERENCE):
    """``x`` indexed at ``index`` along ``axis`` (the axis is dropped)."""
    out = np.take(x, index, axis=axis)
    if ctx.tape is not None:

        def vjp(g):
            full = np.zeros_like(x)
            idx = [slice(None)] * x.ndim
            idx[axis] = index
            full[tuple(idx)] = g
            return (full,)

        ctx.tape.record(out, (x,), vjp)
    return out


def mean_axis(x, axis: int, ctx: Ctx = INFERENCE):
    out = x.mean(axis=axis, keepdims=True)
    if ctx.tape is not None:
        n = x.shape[axis]
        ctx.tape.record(out, (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),))
    return out


def broadcast(x, shape, ctx: Ctx = INFERENCE):
    out = np.broadcast_to(x, shape).copy()
    if ctx.tape is not None:
        ctx.tape.record(out, (x,), lambda g: (_unbroadcast(g, x.shape),))
    return out


def transpose(x, axes, ctx: Ctx = INFERENCE):
    out = np.transpose(x, axes).copy()
    if ctx.tape is not None:
        inv = np.argsort(axes)
        ctx.tape.record(out, (x,), lambda g: (np.transpose(g, inv),))
    return out


def reshape(x, shape, ctx: Ctx = INFERENCE):
    out = x.reshape(shape).copy()
    if ctx.tape is not None:
        ctx.tape.record(out, (x,), lambda g: (g.reshape(x.shape),))
    return out


def cross_entropy(logits, labels, ctx: Ctx = INFERENCE, class_axis: int = 1):
    """Mean softmax cross-entropy; returns a 0-d array."""
    z = np.moveaxis(logits, class_axis, -1)
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    out = np.asarray(-picked.mean(), dtype=logits.dtype)
    if ctx.tape is not None:

        def vjp(g):
            p = np.exp(logp)
            np.put_along_axis(p, labels[..., None], np.take_along_axis(p, labels[..., None], -1) - 1, -1)
            return (np.moveaxis(p * (g / labels.size), -1, class_axis),)

        ctx.tape.record(out, (logits,), vjp)
    return out


# ---------------------------------------------------------------------------
# driver

def forward_record(net, x, training: bool = False, surrogate: bool = False):
    """Run ``net(x, ctx)`` with a fresh tape; returns ``(y, tape)``."""
    tape = Tape()
    y = net(x, Ctx(tape, training, surrogate))
    tape.output = y
    return y, tape


def backward(tape: Tape, dL_dy, params=None) -> dict:
    """Reverse sweep.  Returns gradients for every trainable parameter in
    ``params`` (a parameter tree or name->array dict); parameters the forward
    never touched get zero gradients."""
    if tape.output is None:
        raise TapeMismatch("tape has no recorded output")
    dL_dy = np.asarray(dL_dy, dtype=tape.output.dtype)
    if dL_dy.shape != tape.output.shape:
        raise TapeMismatch(f"seed gradient {dL_dy.shape} != output {tape.output.shape}")
    named = named_parameters(params) if params is not None else None
    if named is not None:
        known = {id(a) for a in named.values()}
        stray = [p for pid, p in tape.touched_params().items() if pid not in known]
        if stray:
            raise TapeMismatch(f"tape touched {len(stray)} parameters outside the given set")

    grads: dict[int, np.ndarray] = {id(tape.output): dL_dy}
    pgrads: dict[int, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        result = node.vjp(g)
        if node.params:
            in_grads, par_grads = result
        else:
            in_grads, par_grads = result, ()
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None:
                continue
            key = id(inp)
            grads[key] = grads[key] + gi if key in grads else gi
        for p, gp in zip(node.params, par_grads):
            key = id(p)
            pgrads[key] = pgrads[key] + gp if key in pgrads else gp

    if named is None:
        return {f"p{i}": pgrads[pid] for i, pid in enumerate(tape.touched_params()) if pid in pgrads}
    return {
        name: pgrads.get(id(arr), np.zeros_like(arr)).astype(arr.dtype, copy=False)
        for name, arr in named.items()
    }


def input_gradient(tape: Tape, dL_dy, x) -> np.ndarray:
    """Gradient with respect to a forward input array ``x``."""
    dL_dy = np.asarray(dL_dy, dtype=tape.output.dtype)
    grads = {id(tape.output): dL_dy}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        result = node.vjp(g)
        in_grads = result[0] if node.params else result
        for inp, gi in zip(node.inputs, in_grads):
            key = id(inp)
            grads[key] = grads[key] + gi if key in grads else gi
    return grads.get(id(x), np.zeros_like(x))


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class OptimState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params, grads: dict[str, np.ndarray], state: OptimState) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Binarized convs found in ``params`` get their scale and sign bits
    recomputed afterwards.
    """
    named = named_parameters(params)
    for name, g in grads.items():
        if name not in named or named[name].shape != np.shape(g):
            raise ShapeMismatch(f"gradient {name!r} does not match a parameter")
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1**t
    c2 = 1 - state.beta2**t
    for name, p in named.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        if state.weight_decay:
            p *= 1 - state.lr * state.weight_decay
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    for conv in binary_convs(params):
        conv.refresh()


# ---------------------------------------------------------------------------
# gradient checking

def finite_diff_check(net, params, x, epsilon: float = 1e-4, seed: int = 0,
                      training: bool = False, floor: float = 1e-8) -> float:
    """Max relative error between backward() and central differences.

    ``net(x, ctx)`` is run in surrogate mode.  The loss is a fixed random
    projection of the output.  Entries with ``|analytic| + |numeric| <= floor``
    are skipped.
    """
    rng = np.random.default_rng(seed)
    y, tape = forward_record(net, x, training=training, surrogate=True)
    proj = rng.standard_normal(y.shape).astype(y.dtype)
    analytic = backward(tape, proj, params)
    ctx = Ctx(None, training, True)

    def loss():
        return float(np.sum(net(x, ctx) * proj, dtype=np.float64))

    worst = 0.0
    for name, arr in named_parameters(params).items():
        flat = arr.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            lp = loss()
            flat[i] = orig - epsilon
            lm = loss()
            flat[i] = orig
            num = (lp - lm) / (2 * epsilon)
            a = float(ga[i])
            if abs(a) + abs(num) > floor:
                worst = max(worst, abs(a - num) / max(abs(a), abs(num)))
    return worst
