"""Desk-scale occupancy prediction on synthetic box scenes.

Scenes are axis-aligned boxes on the floor of an (X, Y, Z) voxel grid.  A
box's class fixes its height, so the top-down depth map determines labels.
Views are orthographic depth maps in [0, 1] (1 = no hit):

* view 0 looks down -Z: pixel rows follow X, columns follow Y;
* view 1 looks along +Y: rows follow Z (top first), columns follow X;
* view 2 looks along +X: rows follow Z (top first), columns follow Y.

Network: fp stem -> DownSample x2 -> neck (UpSample of the deepest map,
concatenated with the stride-2 map) -> fixed projection onto the BEV grid ->
fp 1x1 adapter -> Basic x2 -> ChannelReduce head -> channel-to-height.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .analysis import LayerSpec, cost_of_network
from .autograd import INFERENCE, Ctx, OptimState
from .bitconv import ConvGeometry
from .errors import ChannelPlanMismatch, GridTooSmall, LabelOutOfRange, ShapeMismatch
from .units import (
    BatchNormParams,
    BDCUnitConfig,
    BDCUnitParams,
    ModuleKind,
    RPReLUParams,
    Variant,
    init_unit,
    kaiming,
    module_forward,
)
from .binarize import _param

SCOPES = ("base", "tiny", "small")


# ---------------------------------------------------------------------------
# scenes


@dataclass(frozen=True)
class Box:
    cls: int
    lo: tuple[int, int, int]
    hi: tuple[int, int, int]  # exclusive


@dataclass
class ToyScene:
    views: np.ndarray  # (N_view, 1, H, W) float32
    labels: np.ndarray  # (X, Y, Z) int64


def class_height(cls: int, n_class: int, z: int) -> int:
    if n_class <= 2:
        return z
    return 1 + (cls - 1) * (z - 1) // (n_class - 2)


def render_views(occ: np.ndarray, n_views: int = 2, image: int = 32) -> np.ndarray:
    """Normalized orthographic depth maps of a boolean (X, Y, Z) grid."""
    X, Y, Z = occ.shape
    views = []

    def first_hit(mask, axis, length):
        hit = mask.any(axis=axis)
        idx = np.argmax(mask, axis=axis)
        return np.where(hit, idx / length, 1.0)

    # top-down: distance from the top face
    top = first_hit(occ[:, :, ::-1], 2, Z)
    views.append(np.kron(top, np.ones((image // X, image // Y))))
    if n_views > 1:
        side = first_hit(occ, 1, Y)[:, ::-1].T  # rows: z top first, cols: x
        views.append(np.kron(side, np.ones((image // Z, image // X))))
    if n_views > 2:
        side = first_hit(occ, 0, X)[:, ::-1].T  # rows: z top first, cols: y
        views.append(np.kron(side, np.ones((image // Z, image // Y))))
    return np.stack(views)[:, None].astype(np.float32)


def generate_scene(seed: int, grid=(16, 16, 4), n_boxes: int = 4, n_class: int = 4,
                   n_views: int = 2, image: int = 32, boxes: list[Box] | None = None) -> ToyScene:
    X, Y, Z = grid
    if min(grid) < 4:
        raise GridTooSmall(f"grid dims must be >= 4, got {grid}")
    if n_class < 2:
        raise ValueError("n_class must be >= 2")
    if not 1 <= n_views <= 3 or image % X or image % Y or image % Z:
        raise ValueError(f"cannot render {n_views} views at {image}px for grid {grid}")
    if boxes is None:
        rng = np.random.default_rng(seed)
        boxes = []
        for _ in range(n_boxes):
            cls = int(rng.integers(1, n_class))
            sx, sy = (int(v) for v in rng.integers(2, max(3, X // 2 - 1), size=2))
            x0 = int(rng.integers(0, X - sx + 1))
            y0 = int(rng.integers(0, Y - sy + 1))
            boxes.append(Box(cls, (x0, y0, 0), (x0 + sx, y0 + sy, class_height(cls, n_class, Z))))
    labels = np.zeros(grid, dtype=np.int64)
    for b in boxes:
        if not 0 < b.cls < n_class:
            raise LabelOutOfRange(f"box class {b.cls} outside 1..{n_class - 1}")
        labels[b.lo[0] : b.hi[0], b.lo[1] : b.hi[1], b.lo[2] : b.hi[2]] = b.cls
    return ToyScene(render_views(labels > 0, n_views, image), labels)


def make_dataset(n: int, seed: int, **scene_kw) -> tuple[np.ndarray, np.ndarray]:
    """Stacked views (n, V, 1, H, W) and labels (n, X, Y, Z)."""
    seeds = np.random.SeedSequence(seed).generate_state(n)
    scenes = [generate_scene(int(s), **scene_kw) for s in seeds]
    return np.stack([s.views for s in scenes]), np.stack([s.labels for s in scenes])


# ---------------------------------------------------------------------------
# network


@dataclass(frozen=True)
class NetSpec:
    grid: tuple[int, int, int] = (16, 16, 4)
    n_class: int = 4
    n_views: int = 2
    image: int = 32
    img_channels: int = 1
    stem_channels: int = 8
    unit: BDCUnitConfig = BDCUnitConfig()
    scope: str = "base"
    bev_blocks: int = 2

    def __post_init__(self):
        if self.scope not in SCOPES:
            raise ValueError(f"scope must be one of {SCOPES}, got {self.scope!r}")

    @property
    def neck_channels(self) -> int:
        return 4 * self.stem_channels + 2 * self.stem_channels

    @property
    def bev_channels(self) -> int:
        return 2 * self.grid[2] * self.n_class


@dataclass
class FpConvParams:
    weight: np.ndarray = _param()
    bias: np.ndarray | None = _param(default=None)
    geometry: ConvGeometry | None = None


@dataclass
class OccParams:
    stem: FpConvParams
    stem_bn: BatchNormParams
    stem_act: RPReLUParams
    encoder: list[BDCUnitParams]
    neck: BDCUnitParams
    adapter: FpConvParams
    bev: list[BDCUnitParams]
    head: BDCUnitParams


class OccNet:
    """Assembled toy network; call ``net(views, ctx)`` for logits
    shaped (N, n_class, X, Y, Z)."""

    def __init__(self, spec: NetSpec, params: OccParams):
        self.spec = spec
        self.params = params
        s = spec
        c0 = s.stem_channels
        h = s.image
        enc_bin = s.scope == "small"
        neck_bin = s.scope in ("tiny", "small")
        self.enc_cfgs = [
            s.unit.replace(channels=c0, binarized=enc_bin),
            s.unit.replace(channels=2 * c0, binarized=enc_bin),
        ]
        self.enc_sizes = [h, h // 2]
        self.neck_cfg = s.unit.replace(channels=4 * c0, binarized=neck_bin)
        self.neck_size = h // 4
        self.bev_cfg = s.unit.replace(channels=s.bev_channels, binarized=True)

    # -- forward ---------------------------------------------------------
    def __call__(self, views, ctx: Ctx = INFERENCE):
        s, p = self.spec, self.params
        views = np.asarray(views)
        n, v = views.shape[:2]
        x = ag.reshape(views, (n * v,) + views.shape[2:], ctx)
        x = ag.fp_conv(x, p.stem.weight, None, p.stem.geometry, ctx)
        x = ag.batchnorm(x, p.stem_bn.weight, p.stem_bn.bias, p.stem_bn.running_mean,
                         p.stem_bn.running_var, ctx)
        x = ag.rprelu(x, p.stem_act.beta, p.stem_act.gamma, p.stem_act.zeta, ctx)
        x1 = module_forward(x, ModuleKind.DOWNSAMPLE, self.enc_cfgs[0], p.encoder[0], ctx)
        x2 = module_forward(x1, ModuleKind.DOWNSAMPLE, self.enc_cfgs[1], p.encoder[1], ctx)
        up = module_forward(x2, ModuleKind.UPSAMPLE, self.neck_cfg, p.neck, ctx)
        feats = ag.concat([up, x1], 1, ctx)
        bev = self.project(feats, n, v, ctx)
        bev = ag.fp_conv(bev, p.adapter.weight, p.adapter.bias, p.adapter.geometry, ctx)
        for unit in p.bev:
            bev = module_forward(bev, ModuleKind.BASIC, self.bev_cfg, unit, ctx)
        out = module_forward(bev, ModuleKind.CHANNEL_REDUCE, self.bev_cfg, p.head, ctx)
        return channel_to_height(out, s.n_class, s.grid[2], ctx)

    def project(self, feats, n: int, v: int, ctx: Ctx = INFERENCE):
        """Fixed orthographic scatter of per-view features onto the BEV grid.

        Each BEV cell averages the feature pixels that project onto it.
        Output: (N, V*C, X, Y).
        """
        X, Y, _ = self.spec.grid
        c, fh, fw = feats.shape[1:]
        feats = ag.reshape(feats, (n, v, c, fh, fw), ctx)
        per_view = []
        for i in range(v):
            f = ag.select(feats, i, 1, ctx)
            if i == 0:
                f = _pool_to(f, X, Y, ctx)
            else:
                f = ag.mean_axis(f, 2, ctx)  # collapse height rows
                f = _pool_to(f, 1, X if i == 1 else Y, ctx)
                if i == 1:
                    f = ag.transpose(f, (0, 1, 3, 2), ctx)
                f = ag.broadcast(f, (n, c, X, Y), ctx)
            per_view.append(f)
        return ag.concat(per_view, 1, ctx)

    # -- bookkeeping -----------------------------------------------------
    def parameters(self) -> dict[str, np.ndarray]:
        return ag.named_parameters(self.params)

    def n_parameters(self) -> int:
        return sum(a.size for a in self.parameters().values())

    def layers(self) -> list[LayerSpec]:
        p = self.params
        out = [
            LayerSpec("image", "stem", p.stem.geometry),
            LayerSpec("image", "stem_bn", n_params=2 * p.stem.geometry.c_out),
            LayerSpec("image", "stem_act", n_params=3 * p.stem.geometry.c_out),
        ]
        for i, (cfg, unit) in enumerate(zip(self.enc_cfgs, p.encoder)):
            out += unit_layers("image", f"encoder.{i}", cfg, unit)
        out += unit_layers("image", "neck", self.neck_cfg, p.neck)
        out.append(LayerSpec("bev", "adapter", p.adapter.geometry, bias=True))
        for i, unit in enumerate(p.bev):
            out += unit_layers("bev", f"bev.{i}", self.bev_cfg, unit)
        out += unit_layers("head", "head", self.bev_cfg, p.head)
        return out

    def cost(self):
        return cost_of_network(self)

    def binary_convs(self):
        return ag.binary_convs(self.params)


def _pool_to(f, h, w, ctx):
    """Average-pool the last two axes down to (h, w) by integer factors."""
    fh, fw = f.shape[-2:]
    if fh % h or fw % w:
        raise ShapeMismatch(f"cannot pool {(fh, fw)} onto {(h, w)}")
    rh, rw = fh // h, fw // w
    if rh == rw == 1:
        return f
    f = ag.reshape(f, f.shape[:-2] + (h, rh, w, rw), ctx)
    f = ag.mean_axis(f, -1, ctx)
    f = ag.mean_axis(f, -3, ctx)
    return ag.reshape(f, f.shape[:-4] + (h, w), ctx)


def channel_to_height(x, n_class: int, z: int, ctx: Ctx = INFERENCE):
    """(N, Z*n_class, X, Y) -> (N, n_class, X, Y, Z); channel = cls * Z + z."""
    n, c, X, Y = x.shape
    if c != z * n_class:
        raise ChannelPlanMismatch(f"head has {c} channels, need Z*n_class = {z * n_class}")
    x = ag.reshape(x, (n, n_class, z, X, Y), ctx)
    return ag.transpose(x, (0, 1, 3, 4, 2), ctx)


def height_to_channel(logits) -> np.ndarray:
    n, k, X, Y, z = logits.shape
    return np.transpose(logits, (0, 1, 4, 2, 3)).reshape(n, k * z, X, Y)


def unit_layers(stage: str, name: str, cfg: BDCUnitConfig, unit: BDCUnitParams) -> list[LayerSpec]:
    out = []

    stages = [(f"first.{i}", st) for i, st in enumerate(unit.first)]
    stages += [(f"rest.{i}", st) for i, st in enumerate(unit.rest)]
    for sub, st in stages:
        g = st.geometry
        out.append(LayerSpec(stage, f"{name}.{sub}.conv", g, cfg.binarized))
        out.append(LayerSpec(stage, f"{name}.{sub}.redist", n_params=2 * g.c_in))
        out.append(LayerSpec(stage, f"{name}.{sub}.bn", n_params=2 * g.c_out))
        out.append(LayerSpec(stage, f"{name}.{sub}.act", n_params=3 * g.c_out))
    last = stages[-1][1].geometry
    c, h, w = last.c_out, last.h_out, last.w_out
    for tag, stack, hw in (("mul", unit.mul, (h, w)), ("gate", unit.gate or [], (1, 1))):
        for i, layer in enumerate(stack):
            g = ConvGeometry(c, c, 1, 1, 0, *hw)
            out.append(LayerSpec(stage, f"{name}.{tag}.{i}.conv", g, cfg.binarized))
            out.append(LayerSpec(stage, f"{name}.{tag}.{i}.redist", n_params=2 * c))
            out.append(LayerSpec(stage, f"{name}.{tag}.{i}.act", n_params=3 * c))
    return out


def build_network(spec: NetSpec, seed: int = 0, dtype=np.float32) -> OccNet:
    X, Y, Z = spec.grid
    c0 = spec.stem_channels
    if spec.image % 4 or (spec.image // 2) % X or (spec.image // 2) % Y:
        raise ChannelPlanMismatch(f"image size {spec.image} does not tile grid {spec.grid}")
    if spec.bev_channels % 2:
        raise ChannelPlanMismatch("BEV channel count must be even")
    rng = np.random.default_rng(seed)
    h = spec.image
    stem_g = ConvGeometry.same(spec.img_channels, c0, 3, h, h)
    enc = [
        init_unit(spec.unit.replace(channels=c0), h, h, ModuleKind.DOWNSAMPLE, rng, dtype),
        init_unit(spec.unit.replace(channels=2 * c0), h // 2, h // 2, ModuleKind.DOWNSAMPLE, rng, dtype),
    ]
    neck = init_unit(spec.unit.replace(channels=4 * c0), h // 4, h // 4, ModuleKind.UPSAMPLE, rng, dtype)
    c_proj = spec.n_views * spec.neck_channels
    cb = spec.bev_channels
    adapter_g = ConvGeometry.same(c_proj, cb, 1, X, Y)
    bev_cfg = spec.unit.replace(channels=cb)
    params = OccParams(
        FpConvParams(kaiming(rng, stem_g.weight_shape, dtype), None, stem_g),
        BatchNormParams.init(c0, dtype),
        RPReLUParams.init(c0, dtype),
        enc,
        neck,
        FpConvParams(kaiming(rng, adapter_g.weight_shape, dtype), np.zeros(cb, dtype), adapter_g),
        [init_unit(bev_cfg, X, Y, ModuleKind.BASIC, rng, dtype) for _ in range(spec.bev_blocks)],
        init_unit(bev_cfg, X, Y, ModuleKind.CHANNEL_REDUCE, rng, dtype),
    )
    return OccNet(spec, params)


# ---------------------------------------------------------------------------
# metric


def miou(pred, gt, n_class: int) -> tuple[list[float], float]:
    """Per-class IoU (NaN for classes absent from both) and their mean."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")
    for arr in (pred, gt):
        if arr.size and (arr.min() < 0 or arr.max() >= n_class):
            raise LabelOutOfRange(f"labels must lie in [0, {n_class})")
    ious = []
    for c in range(n_class):
        p, g = pred == c, gt == c
        union = np.count_nonzero(p | g)
        ious.append(np.count_nonzero(p & g) / union if union else math.nan)
    present = [v for v in ious if not math.isnan(v)]
    return ious, (sum(present) / len(present) if present else math.nan)


def majority_baseline_miou(train_labels, test_labels, n_class: int) -> float:
    """mIoU of always predicting the most frequent training class."""
    counts = np.bincount(np.asarray(train_labels).ravel(), minlength=n_class)
    pred = np.full_like(test_labels, int(np.argmax(counts)))
    return miou(pred, test_labels, n_class)[1]


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 1e-2
    seed: int = 0
    n_train: int = 64
    n_test: int = 16
    n_boxes: int = 4
    eval_every: int = 0

    def hash(self, spec: NetSpec | None = None) -> str:
        blob = repr((asdict(self), spec))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class TrainReport:
    losses: list[float]
    miou: float
    per_class_iou: list[float]
    wall_time: float
    seed: int
    config_hash: str
    baseline_miou: float = math.nan

    def same_results(self, other: TrainReport) -> bool:
        """Equality of everything except wall time."""
        return (
            self.losses == other.losses
            and _nan_eq(self.per_class_iou, other.per_class_iou)
            and _nan_eq([self.miou], [other.miou])
            and self.seed == other.seed
            and self.config_hash == other.config_hash
        )


def _nan_eq(a, b):
    return len(a) == len(b) and all(x == y or (math.isnan(x) and math.isnan(y)) for x, y in zip(a, b))


def dataset_for(spec: NetSpec, cfg: TrainConfig):
    kw = dict(grid=spec.grid, n_class=spec.n_class, n_views=spec.n_views, image=spec.image,
              n_boxes=cfg.n_boxes)
    train_set = make_dataset(cfg.n_train, cfg.seed, **kw)
    test_set = make_dataset(cfg.n_test, cfg.seed + 1_000_003, **kw)
    return train_set, test_set


def predict(net: OccNet, views, batch_size: int = 16) -> np.ndarray:
    out = []
    for i in range(0, len(views), batch_size):
        logits = net(views[i : i + batch_size].astype(np.float32), INFERENCE)
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out)


def evaluate(net: OccNet, views, labels) -> tuple[list[float], float]:
    return miou(predict(net, views), labels, net.spec.n_class)


def train_step(net: OccNet, views, labels, state: OptimState) -> float:
    def loss_fn(x, ctx):
        return ag.cross_entropy(net(x, ctx), labels, ctx)

    loss, tape = ag.forward_record(loss_fn, views, training=True)
    grads = ag.backward(tape, np.ones((), dtype=loss.dtype), net.params)
    ag.adamw_step(net.params, grads, state)
    return float(loss)


def train(net: OccNet, dataset, cfg: TrainConfig, log=None) -> TrainReport:
    """AdamW on voxel cross-entropy, then held-out mIoU.

    ``dataset`` is ``((train_views, train_labels), (test_views, test_labels))``.
    ``losses`` holds the training loss of every step.
    """
    (xv, yv), (tv, tl) = dataset
    if len(xv) == 0:
        raise ValueError("empty training set")
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    state = OptimState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    losses = []
    order = np.array([], dtype=np.int64)
    for step in range(cfg.steps):
        if len(order) < cfg.batch_size:
            order = np.concatenate([order, rng.permutation(len(xv))])
        idx, order = order[: cfg.batch_size], order[cfg.batch_size :]
        loss = train_step(net, xv[idx].astype(np.float32), yv[idx], state)
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {step}")
        losses.append(loss)
        if log and (step % 20 == 0 or step == cfg.steps - 1):
            log(f"step {step:4d} loss {loss:.4f}")
    per_class, mean = evaluate(net, tv, tl)
    return TrainReport(
        losses,
        mean,
        per_class,
        time.perf_counter() - t0,
        cfg.seed,
        cfg.hash(net.spec),
        majority_baseline_miou(yv, tl, net.spec.n_class),
    )


# ---------------------------------------------------------------------------
# ablations

BREAKDOWN = [
    ("BDC-V0", BDCUnitConfig(Variant.V0, 0)),
    ("BDC-V1", BDCUnitConfig(Variant.V1, 0)),
    ("BDC-V2", BDCUnitConfig(Variant.V2, 2)),
    ("BDC-V3", BDCUnitConfig(Variant.V3, 2)),
]

KERNELS = [
    ("3->1", BDCUnitConfig(Variant.V1, 0, kernels=(3, 1))),
    ("3->3", BDCUnitConfig(Variant.V1, 0, kernels=(3, 3))),
    ("1->1", BDCUnitConfig(Variant.V1, 0, kernels=(1, 1))),
    ("3->3->1", BDCUnitConfig(Variant.V1, 0, kernels=(3, 3, 1))),
]

MULBICONV_SWEEP = [(f"V3-N{n}", BDCUnitConfig(Variant.V3, n)) for n in range(5)]

ABLATIONS = {"breakdown": BREAKDOWN, "kernel": KERNELS, "mulbiconv": MULBICONV_SWEEP}

ABLATE_COLUMNS = ["table", "variant", "miou", "ops", "params", "final_loss", "seed"]


def ablate(variants, spec: NetSpec, cfg: TrainConfig, table: str = "", log=None) -> list[dict]:
    """Train each ``(label, BDCUnitConfig)`` under the same seeds and budget."""
    dataset = dataset_for(spec, cfg)
    rows = []
    for label, unit in variants:
        s = NetSpec(**{**spec.__dict__, "unit": unit})
        net = build_network(s, seed=cfg.seed)
        cost = net.cost()
        rep = train(net, dataset, cfg)
        rows.append({
            "table": table,
            "variant": label,
            "miou": rep.miou,
            "ops": float(cost.ops_total),
            "params": float(cost.params_total),
            "final_loss": rep.losses[-1] if rep.losses else math.nan,
            "seed": cfg.seed,
        })
        if log:
            log(f"{table} {label}: mIoU {rep.miou:.4f}")
    return rows
