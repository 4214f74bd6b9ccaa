"""Tape recording, backward rules, AdamW and the finite-difference checker."""

import math
from dataclasses import dataclass

import numpy as np
import pytest

from bdcocc import autograd as ag
from bdcocc.autograd import (
    Ctx,
    OptimState,
    adamw_step,
    backward,
    finite_diff_check,
    forward_record,
    input_gradient,
    named_parameters,
)
from bdcocc.binarize import BinaryConvParams, _param
from bdcocc.bitconv import ConvGeometry, conv2d_bit
from bdcocc.errors import ShapeMismatch, TapeMismatch
from bdcocc.tensor import bit_pack
from bdcocc.units import (
    BDCUnitConfig,
    ModuleKind,
    RPReLUParams,
    Variant,
    bdc_forward,
    init_unit,
    module_forward,
    rprelu,
)


@dataclass
class Vec:
    """Bare parameter holder for single-primitive checks."""

    a: np.ndarray = _param()
    b: np.ndarray = _param()


def rng64(seed, *shape):
    return np.random.default_rng(seed).standard_normal(shape)


# ---------------------------------------------------------------------------
# forward_record delegates to the plain forward


def test_record_rprelu_matches_units():
    p = RPReLUParams(rng64(0, 3), rng64(1, 3), rng64(2, 3))
    x = rng64(3, 3, 4, 4)
    y, tape = forward_record(lambda x, ctx: rprelu(x, p, ctx), x)
    np.testing.assert_array_equal(y, rprelu(x, p))
    assert len(tape) == 1


def test_record_bitconv_matches_kernel():
    g = ConvGeometry.same(5, 3, 3, 4, 4)
    conv = BinaryConvParams(rng64(4, *g.weight_shape))
    x = np.where(rng64(5, 5, 4, 4) > 0, 1.0, -1.0)
    y, _ = forward_record(lambda x, ctx: ag.binary_conv(x, conv, g, ctx), x)
    np.testing.assert_array_equal(y, conv2d_bit(bit_pack(x), conv, g))


def test_record_deep_stack_bitwise():
    cfg = BDCUnitConfig(Variant.V3, 2, channels=4)
    units = [init_unit(cfg, 4, 4, seed=s) for s in range(10)]

    def net(x, ctx):
        for p in units:
            x = bdc_forward(x, cfg, p, ctx)
        return x

    x = rng64(6, 2, 4, 4, 4).astype(np.float32)
    y, tape = forward_record(net, x)
    np.testing.assert_array_equal(y, net(x, ag.INFERENCE))
    assert len(tape) > 10


# ---------------------------------------------------------------------------
# hand-derivable gradients


def test_rprelu_grads_above_kink():
    p = RPReLUParams(np.full(2, 0.25), np.zeros(2), np.zeros(2))
    x = np.abs(rng64(7, 2, 3, 5)) + 0.5
    _, tape = forward_record(lambda x, ctx: rprelu(x, p, ctx), x)
    grads = backward(tape, np.ones_like(x), p)
    np.testing.assert_array_equal(grads["beta"], 0)
    np.testing.assert_array_equal(grads["zeta"], 15)
    np.testing.assert_array_equal(grads["gamma"], -15)


def test_redistribute_grads():
    p = Vec(rng64(8, 3), rng64(9, 3))
    x = rng64(10, 3, 4, 2)
    _, tape = forward_record(lambda x, ctx: ag.redistribute(x, p.a, p.b, ctx), x)
    grads = backward(tape, np.ones_like(x), p)
    np.testing.assert_allclose(grads["a"], x.sum(axis=(1, 2)), rtol=1e-14)
    np.testing.assert_array_equal(grads["b"], 8)


def test_sign_backward_uses_tanh_derivative():
    x = rng64(11, 3, 2, 2)
    for alpha in (0.5, 1.0, 3.0):
        _, tape = forward_record(lambda x, ctx: ag.binarize_act(x, alpha, ctx), x)
        g = input_gradient(tape, np.ones_like(x), x)
        np.testing.assert_allclose(g, alpha * (1 - np.tanh(alpha * x) ** 2), rtol=1e-15)


def test_hard_and_surrogate_share_backward_rules():
    x = rng64(12, 4, 3, 3)
    up = rng64(13, 4, 3, 3)
    grads = []
    for surrogate in (False, True):
        _, tape = forward_record(lambda x, ctx: ag.binarize_act(x, 1.0, ctx), x, surrogate=surrogate)
        grads.append(input_gradient(tape, up, x))
    np.testing.assert_array_equal(*grads)
    # weight estimator: identical for the same saved input and upstream
    g = ConvGeometry.same(4, 2, 3, 3, 3)
    conv = BinaryConvParams(rng64(14, *g.weight_shape))
    xb = np.where(x > 0, 1.0, -1.0)
    wgrads = []
    for surrogate in (False, True):
        _, tape = forward_record(lambda x, ctx: ag.binary_conv(x, conv, g, ctx), xb, surrogate=surrogate)
        wgrads.append(backward(tape, np.ones((2, 3, 3)), conv)["latent_weights"])
    np.testing.assert_allclose(*wgrads, rtol=1e-15)


def test_backward_key_set_and_untouched_zero():
    cfg = BDCUnitConfig(Variant.V3, 1, channels=2)
    p = init_unit(cfg, 3, 3, seed=0, dtype=np.float64)
    x = rng64(15, 2, 3, 3)
    y, tape = forward_record(lambda x, ctx: bdc_forward(x, cfg, p, ctx), x)
    grads = backward(tape, np.ones_like(y), p)
    assert set(grads) == set(named_parameters(p))
    spare = init_unit(BDCUnitConfig(Variant.V2, 1, channels=2), 3, 3, dtype=np.float64)
    both = {"unit": p, "spare": spare}
    grads = backward(tape, np.ones_like(y), both)
    assert all(np.all(v == 0) for k, v in grads.items() if k.startswith("spare"))


def test_backward_tape_mismatch():
    cfg = BDCUnitConfig(Variant.V1, 0, channels=2)
    p = init_unit(cfg, 3, 3, seed=0, dtype=np.float64)
    y, tape = forward_record(lambda x, ctx: bdc_forward(x, cfg, p, ctx), rng64(16, 2, 3, 3))
    with pytest.raises(TapeMismatch):
        backward(tape, np.ones((2, 3, 4)), p)
    other = init_unit(cfg, 3, 3, seed=1, dtype=np.float64)
    with pytest.raises(TapeMismatch):
        backward(tape, np.ones_like(y), other)
    with pytest.raises(TapeMismatch):
        backward(ag.Tape(), np.ones(1), p)


def test_gate_product_rule_reaches_both_factors():
    a, b = rng64(17, 3, 1, 1), rng64(18, 3, 4, 4)
    _, tape = forward_record(lambda x, ctx: ag.mul(ag.sigmoid(a, ctx), x, ctx), b)
    gb = input_gradient(tape, np.ones_like(b), b)
    np.testing.assert_allclose(gb, np.broadcast_to(1 / (1 + np.exp(-a)), b.shape), rtol=1e-14)
    _, tape = forward_record(lambda x, ctx: ag.mul(ag.sigmoid(x, ctx), b, ctx), a)
    s = 1 / (1 + np.exp(-a))
    np.testing.assert_allclose(input_gradient(tape, np.ones_like(b), a),
                               s * (1 - s) * b.sum(axis=(1, 2), keepdims=True), rtol=1e-12)


# ---------------------------------------------------------------------------
# finite differences


def test_fd_linear_fp_layer():
    g = ConvGeometry.same(3, 2, 3, 4, 4)
    p = Vec(rng64(19, *g.weight_shape), rng64(20, 2))
    err = finite_diff_check(lambda x, ctx: ag.fp_conv(x, p.a, p.b, g, ctx), p, rng64(21, 2, 3, 4, 4))
    assert err < 1e-9


def test_fd_rprelu_away_from_kink():
    p = RPReLUParams(rng64(22, 3), np.zeros(3), rng64(23, 3))
    x = rng64(24, 2, 3, 4, 4)
    x = np.where(np.abs(x) < 0.1, x + np.sign(x) * 0.2 + 0.2 * (x == 0), x)
    assert np.all(np.abs(x) > 0.1)
    assert finite_diff_check(lambda x, ctx: rprelu(x, p, ctx), p, x) < 1e-6


def _redistribute(p):
    return lambda x, ctx: ag.redistribute(x, p.a, p.b, ctx)


def _rprelu(p):
    # gamma and zeta share one array; min |x - gamma| is about 0.085 for these seeds
    return lambda x, ctx: ag.rprelu(x, p.a, p.b, p.b, ctx)


def _batchnorm_train(p):
    def net(x, ctx):
        return ag.batchnorm(x, p.a, p.b, np.zeros(3), np.ones(3), Ctx(ctx.tape, True, ctx.surrogate))

    return net


def _batchnorm_eval(p):
    return lambda x, ctx: ag.batchnorm(x, p.a, p.b, np.full(3, 0.3), np.full(3, 2.0), ctx)


def _sigmoid_gate(p):
    def net(x, ctx):
        logits = ag.redistribute(ag.spatial_mean(x, ctx), p.a, p.b, ctx)
        return ag.mul(ag.sigmoid(logits, ctx), x, ctx)

    return net


def _resampling(p):
    def net(x, ctx):
        h = ag.upsample2(ag.avgpool2(ag.redistribute(x, p.a, p.b, ctx), ctx), ctx)
        return ag.channel_pair_mean(ag.concat([h, x], 1, ctx), ctx)

    return net


def _shape_ops(p):
    def net(x, ctx):
        h = ag.reshape(ag.redistribute(x, p.a, p.b, ctx), (2, 3, 16), ctx)
        h = ag.mean_axis(ag.transpose(h, (0, 2, 1), ctx), 1, ctx)
        return ag.broadcast(h, (2, 5, 3), ctx)

    return net


def _select_add(p):
    def net(x, ctx):
        return ag.add(ag.select(ag.redistribute(x, p.a, p.b, ctx), 1, 1, ctx), x[:, 0], ctx)

    return net


PRIMITIVES = {
    "redistribute": _redistribute,
    "rprelu": _rprelu,
    "batchnorm_train": _batchnorm_train,
    "batchnorm_eval": _batchnorm_eval,
    "sigmoid_gate": _sigmoid_gate,
    "resampling": _resampling,
    "shape_ops": _shape_ops,
    "select_add": _select_add,
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_fd_primitives(name):
    p = Vec(rng64(25, 3) + 1.5, rng64(26, 3))
    x = rng64(27, 2, 3, 4, 4)
    assert finite_diff_check(PRIMITIVES[name](p), p, x, epsilon=1e-5) < 1e-6


def test_fd_cross_entropy():
    labels = np.random.default_rng(28).integers(0, 4, (2, 3, 3))
    p = Vec(rng64(29, 4), rng64(30, 4))

    def net(x, ctx):
        z = ag.redistribute(x, p.a, p.b, ctx)
        return ag.reshape(ag.cross_entropy(z, labels, ctx), (1,), ctx)

    assert finite_diff_check(net, p, rng64(31, 2, 4, 3, 3), epsilon=1e-5) < 1e-7


def test_fd_binary_conv_surrogate():
    g = ConvGeometry(4, 3, 3, 2, 1, 5, 5)
    conv = BinaryConvParams(rng64(32, *g.weight_shape) * 0.5)
    p = Vec(np.ones(4), np.zeros(4))

    def net(x, ctx):
        h = ag.binarize_act(ag.redistribute(x, p.a, p.b, ctx), 1.0, ctx)
        return ag.binary_conv(h, conv, g, ctx)

    tree = {"p": p, "conv": conv}
    assert finite_diff_check(net, tree, rng64(33, 2, 4, 5, 5), epsilon=1e-5) < 1e-6


@pytest.mark.parametrize("variant", list(Variant))
def test_fd_units(variant):
    cfg = BDCUnitConfig(variant, 2, channels=4)
    for seed in range(2):
        p = init_unit(cfg, 4, 4, seed=seed, dtype=np.float64)
        x = rng64(100 + seed, 2, 4, 4, 4)
        net = lambda x, ctx: bdc_forward(x, cfg, p, ctx)  # noqa: E731
        assert finite_diff_check(net, p, x, epsilon=1e-4, training=True) < 1e-3


@pytest.mark.parametrize("kind", [k for k in ModuleKind if k is not ModuleKind.BASIC])
def test_fd_modules(kind):
    cfg = BDCUnitConfig(Variant.V3, 1, channels=4)
    p = init_unit(cfg, 4, 4, kind, seed=0, dtype=np.float64)
    x = rng64(100, 2, 4, 4, 4)
    net = lambda x, ctx: module_forward(x, kind, cfg, p, ctx)  # noqa: E731
    assert finite_diff_check(net, p, x, epsilon=1e-4, training=True) < 1e-3


def test_fd_v1_inference_mode():
    cfg = BDCUnitConfig(Variant.V1, 0, channels=4)
    p = init_unit(cfg, 4, 4, seed=0, dtype=np.float64)
    x = rng64(100, 2, 4, 4, 4)
    assert finite_diff_check(lambda x, ctx: bdc_forward(x, cfg, p, ctx), p, x) < 1e-3


# ---------------------------------------------------------------------------
# AdamW


def test_adamw_pure_decay():
    p = Vec(np.array([1.0, -2.0, 3.0]), np.array([0.5]))
    expected = p.a * (1 - 0.1 * 0.01)
    adamw_step(p, {"a": np.zeros(3), "b": np.zeros(1)}, OptimState(lr=0.1, weight_decay=0.01))
    np.testing.assert_array_equal(p.a, expected)


def test_adamw_constant_gradient_step_tends_to_lr():
    p = Vec(np.zeros(3), np.zeros(1))
    state = OptimState(lr=1e-3, weight_decay=0.0)
    g = {"a": np.array([0.3, -2.0, 5.0]), "b": np.array([1e-3])}
    for _ in range(200):
        before = p.a.copy()
        adamw_step(p, g, state)
    np.testing.assert_allclose(np.abs(p.a - before), 1e-3, rtol=1e-4)
    assert state.step == 200


def test_adamw_hand_computed():
    p = Vec(np.array([0.5, -1.0, 2.0]), np.array([0.0]))
    g = np.array([0.1, -0.2, 0.3])
    lr, wd, b1, b2, eps = 0.01, 0.1, 0.9, 0.999, 1e-8
    want = p.a.copy()
    m = np.zeros(3)
    v = np.zeros(3)
    state = OptimState(lr=lr, weight_decay=wd)
    for t in (1, 2):
        adamw_step(p, {"a": g}, state)
        for i in range(3):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            want[i] *= 1 - lr * wd
            want[i] -= lr * (m[i] / (1 - b1**t)) / (math.sqrt(v[i] / (1 - b2**t)) + eps)
    np.testing.assert_allclose(p.a, want, rtol=0, atol=1e-12)


def test_adamw_refreshes_binarized_convs():
    conv = BinaryConvParams(np.array([[[[0.01]], [[-0.5]]]]))
    adamw_step(conv, {"latent_weights": np.array([[[[1.0]], [[0.0]]]])},
               OptimState(lr=0.1, weight_decay=0.0))
    assert conv.latent_weights[0, 0, 0, 0] < 0
    assert conv.scale == pytest.approx(np.abs(conv.latent_weights).mean())
    np.testing.assert_array_equal(conv.signs, [[[[-1.0]], [[-1.0]]]])
    assert conv.packed_signs == bit_pack(conv.signs)


def test_adamw_shape_mismatch():
    p = Vec(np.zeros(3), np.zeros(1))
    with pytest.raises(ShapeMismatch):
        adamw_step(p, {"a": np.zeros(4)}, OptimState())


def test_training_is_deterministic():
    cfg = BDCUnitConfig(Variant.V3, 2, channels=4)
    finals = []
    for _ in range(2):
        p = init_unit(cfg, 4, 4, seed=5)
        state = OptimState(lr=1e-2)
        x = rng64(34, 3, 4, 4, 4).astype(np.float32)
        for _ in range(5):
            y, tape = forward_record(lambda x, ctx: bdc_forward(x, cfg, p, ctx), x, training=True)
            adamw_step(p, backward(tape, np.ones_like(y), p), state)
        finals.append(named_parameters(p))
    for k in finals[0]:
        np.testing.assert_array_equal(finals[0][k], finals[1][k])
