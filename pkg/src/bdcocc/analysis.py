"""Binarization-error statistics and the OPs/Params cost model."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable

import numpy as np

from .autograd import conv_grad_input, conv_grad_weight
from .bitconv import ConvGeometry, conv2d_fp
from .errors import InvalidKernel

# ---------------------------------------------------------------------------
# expected |x - sign(x)| for x ~ N(0, 1)


def analytic_abs_error_constant() -> float:
    """Closed form of E|x - sign(x)| under a standard normal, about 0.5354."""
    return 2 * (
        math.erf(1 / math.sqrt(2))
        - 0.5
        - 1 / math.sqrt(2 * math.pi)
        + 2 / math.sqrt(2 * math.pi * math.e)
    )


def abs_error_stats(x) -> tuple[float, float]:
    """Mean and standard error of |x - sign(x)| (sign(0) = -1) over draws x."""
    x = np.asarray(x, dtype=np.float64)
    err = np.abs(x - np.where(x > 0, 1.0, -1.0))
    stderr = float(err.std(ddof=1) / math.sqrt(err.size)) if err.size > 1 else 0.0
    return float(err.mean()), stderr


def monte_carlo_abs_error(n_samples: int, seed: int = 0) -> tuple[float, float]:
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    return abs_error_stats(np.random.default_rng(seed).standard_normal(int(n_samples)))


# ---------------------------------------------------------------------------
# gradient error of a binarized layer


@dataclass
class GradErrorReport:
    k: int
    empirical_eae: float
    predicted_eae: float
    samples: int
    abs_diff_eae: float = 0.0

    @property
    def ratio(self) -> float:
        return self.empirical_eae / self.predicted_eae if self.predicted_eae else math.nan

    @property
    def relative_deviation(self) -> float:
        return abs(self.ratio - 1)


def gradient_error_experiment(k: int, c_channels: int = 4, n_trials: int = 200, seed: int = 0,
                              size: int = 8, alpha: float = 1.0,
                              error_scale: float = 1.0) -> GradErrorReport:
    """Weight-gradient error that input binarization injects into a conv layer.

    Chain: conv_l (k x k) on sign(x) -> tanh(alpha * .) -> conv_{l+1} (k x k),
    with x ~ N(0, 1), random weights and an N(0, 1) upstream gradient at the
    output of conv_{l+1}.  The binarization error is eps = sign(x) - x; the
    downstream factors are those of the binarized forward pass.

    ``empirical_eae`` sums |eps * dsigma * w_next * dL| over every term of the
    weight gradient (absolute value per term) and averages over weight
    elements and trials.  ``predicted_eae`` replaces |eps| by its analytic
    expectation.  ``abs_diff_eae`` is the plain mean of
    |grad(sign x) - grad(x)| for reference.

    Layer-l weights have variance 1/(k*k*C) so the pre-activation
    distribution does not depend on k; layer l+1 weights have variance 1/C
    for every k, keeping the per-term factors matched across kernel sizes.
    """
    if k not in (1, 3):
        raise InvalidKernel(f"kernel size must be 1 or 3, got {k}")
    c = c_channels
    g = ConvGeometry.same(c, c, k, size, size)
    const = analytic_abs_error_constant()
    children = np.random.SeedSequence(seed).spawn(n_trials)
    emp = pred = absdiff = 0.0
    for child in children:
        rng = np.random.default_rng(child)
        x = rng.standard_normal((c, size, size))
        w1 = rng.standard_normal(g.weight_shape) / math.sqrt(k * k * c)
        w2 = rng.standard_normal(g.weight_shape) / math.sqrt(c)
        g2 = rng.standard_normal((c, size, size))
        xb = np.where(x > 0, 1.0, -1.0)
        eps = error_scale * (xb - x)
        y = conv2d_fp(xb, w1, g)
        dsig = alpha * (1 - np.tanh(alpha * y) ** 2)
        g1 = dsig * conv_grad_input(g2, w2, g)
        absdiff += np.abs(conv_grad_weight(eps, g1, g)).mean()
        b = np.abs(dsig) * conv_grad_input(np.abs(g2), np.abs(w2), g)
        emp += conv_grad_weight(np.abs(eps), b, g).mean()
        pred += const * conv_grad_weight(np.ones_like(x), b, g).mean()
    n = len(children)
    return GradErrorReport(k, emp / n, pred / n, n, absdiff / n)


# ---------------------------------------------------------------------------
# cost model


@dataclass
class CostReport:
    """Op and parameter counts.  Binarized counts are exact rationals.

    ``*_binary_fp_equiv`` keep the integer full-precision counts of the
    binarized layers so the /64 and /32 rules can be checked exactly.
    """

    ops_f: Fraction = Fraction(0)
    ops_b: Fraction = Fraction(0)
    params_f: Fraction = Fraction(0)
    params_b: Fraction = Fraction(0)
    ops_binary_fp_equiv: int = 0
    params_binary_fp_equiv: int = 0
    breakdown: dict[str, CostReport] = field(default_factory=dict)

    @property
    def ops_total(self) -> Fraction:
        return self.ops_f + self.ops_b

    @property
    def params_total(self) -> Fraction:
        return self.params_f + self.params_b

    @property
    def params_fp_equiv(self) -> int:
        """Raw element count: full-precision params plus binarized params x 32."""
        return int(self.params_f) + self.params_binary_fp_equiv

    def __add__(self, other: CostReport) -> CostReport:
        return CostReport(
            self.ops_f + other.ops_f,
            self.ops_b + other.ops_b,
            self.params_f + other.params_f,
            self.params_b + other.params_b,
            self.ops_binary_fp_equiv + other.ops_binary_fp_equiv,
            self.params_binary_fp_equiv + other.params_binary_fp_equiv,
        )

    def counts(self) -> tuple[Fraction, Fraction, Fraction, Fraction]:
        return (self.ops_f, self.ops_b, self.params_f, self.params_b)

    def as_row(self) -> dict[str, float]:
        return {
            "ops_f": float(self.ops_f),
            "ops_b": float(self.ops_b),
            "ops_total": float(self.ops_total),
            "params_f": float(self.params_f),
            "params_b": float(self.params_b),
            "params_total": float(self.params_total),
        }


@dataclass(frozen=True)
class LayerSpec:
    """One cost-bearing layer.  Conv layers carry a geometry; elementwise
    layers (BN, RPReLU, redistribution) carry only a parameter count."""

    stage: str
    name: str
    geometry: ConvGeometry | None = None
    binarized: bool = False
    n_params: int = 0
    bias: bool = False


def cost_of_layer(g: ConvGeometry, binarized: bool = False, bias: bool = False) -> CostReport:
    ops = 2 * g.k * g.k * g.c_in * g.c_out * g.h_out * g.w_out
    params = g.k * g.k * g.c_in * g.c_out
    if binarized:
        return CostReport(
            ops_b=Fraction(ops, 64),
            params_b=Fraction(params, 32),
            ops_binary_fp_equiv=ops,
            params_binary_fp_equiv=params,
        )
    # a bias adds parameters but its adds are not counted as ops
    return CostReport(ops_f=Fraction(ops), params_f=Fraction(params + (g.c_out if bias else 0)))


def cost_of_spec(layer: LayerSpec) -> CostReport:
    if layer.geometry is not None:
        return cost_of_layer(layer.geometry, layer.binarized, layer.bias)
    return CostReport(params_f=Fraction(layer.n_params))


def cost_of_network(net) -> CostReport:
    """Sum over ``net.layers()`` (or an iterable of LayerSpec) with a
    per-stage breakdown."""
    layers: Iterable[LayerSpec] = net.layers() if hasattr(net, "layers") else net
    total = CostReport()
    stages: dict[str, CostReport] = {}
    for layer in layers:
        rep = cost_of_spec(layer)
        total = total + rep
        stages[layer.stage] = stages.get(layer.stage, CostReport()) + rep
    total.breakdown = stages
    return total
