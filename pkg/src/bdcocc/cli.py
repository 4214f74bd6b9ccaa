"""Command-line entry point.

Subcommands: verify-theorem, bench-kernel, train, evaluate, ablate, cost.
Exit codes: 0 success, 1 verification/tolerance failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import checkpoint
from .analysis import (
    LayerSpec,
    analytic_abs_error_constant,
    cost_of_network,
    gradient_error_experiment,
    monte_carlo_abs_error,
)
from .binarize import BinaryConvParams
from .bitconv import ConvGeometry, conv2d_bit, conv2d_fp
from .config import RunConfig, load_config, parse_config
from .errors import BDCError, CheckpointError, ConfigError
from .occtoy import (
    ABLATE_COLUMNS,
    ABLATIONS,
    NetSpec,
    TrainReport,
    ablate,
    build_network,
    dataset_for,
    evaluate,
    train,
)
from .tensor import bit_pack, bit_unpack

log = logging.getLogger("bdcocc")

THEOREM_COLUMNS = ["check", "k", "empirical_eae", "predicted_eae", "ratio", "stderr", "samples", "pass"]
BENCH_COLUMNS = ["geometry", "ns_fp", "ns_bit", "speedup", "model_speedup", "deviation"]
COST_COLUMNS = ["level", "name", "ops_f", "ops_b", "ops_total", "params_f", "params_b", "params_total"]
REPORT_COLUMNS = ["record", "index", "value"]

REFERENCE_CONSTANT = 0.5354


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, columns, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c, "")) for c in columns])
            fh.flush()


def read_csv(path) -> list[dict[str, str]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def threads() -> int:
    try:
        return max(1, int(os.environ.get("BDC_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# verify-theorem


def theorem_rows(samples: int, trials: int, seed: int, mc_seeds: int = 1) -> list[dict]:
    const = analytic_abs_error_constant()
    rows = [{
        "check": "analytic_constant", "k": "", "empirical_eae": const,
        "predicted_eae": REFERENCE_CONSTANT, "ratio": const / REFERENCE_CONSTANT, "stderr": 0.0,
        "samples": 0, "pass": abs(const - REFERENCE_CONSTANT) <= 5e-5,
    }]
    for i in range(mc_seeds):
        mean, se = monte_carlo_abs_error(samples, seed + i)
        rows.append({
            "check": "monte_carlo", "k": "", "empirical_eae": mean, "predicted_eae": const,
            "ratio": mean / const, "stderr": se, "samples": samples,
            "pass": abs(mean - const) <= 3 * se if samples > 1 else True,
        })
    reps = {k: gradient_error_experiment(k, n_trials=trials, seed=seed) for k in (1, 3)}
    for k, rep in reps.items():
        rows.append({
            "check": "gradient_error", "k": k, "empirical_eae": rep.empirical_eae,
            "predicted_eae": rep.predicted_eae, "ratio": rep.ratio, "stderr": "",
            "samples": rep.samples, "pass": rep.relative_deviation <= 0.10,
        })
    kr = reps[3].empirical_eae / reps[1].empirical_eae
    rows.append({
        "check": "kernel_ratio", "k": "3/1", "empirical_eae": kr, "predicted_eae": 9.0,
        "ratio": kr / 9.0, "stderr": "", "samples": trials, "pass": 5.0 <= kr <= 13.0,
    })
    return rows


def cmd_verify_theorem(args) -> int:
    rows = theorem_rows(args.samples, args.trials, args.seed, args.mc_seeds)
    for r in rows:
        r["empirical_eae"] = float(r["empirical_eae"])
        r["predicted_eae"] = float(r["predicted_eae"])
        r["ratio"] = float(r["ratio"])
    write_csv(args.out, THEOREM_COLUMNS, rows)
    for r in rows:
        print(f"{r['check']:<18} k={r['k']!s:<4} {r['empirical_eae']:.6g} vs {r['predicted_eae']:.6g}"
              f"  {'PASS' if r['pass'] else 'FAIL'}")
    return 0 if all(r["pass"] for r in rows) else 1


# ---------------------------------------------------------------------------
# bench-kernel


def bench_row(g: ConvGeometry, reps: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    x = np.where(rng.random((g.c_in, g.h, g.w)) < 0.5, -1.0, 1.0).astype(np.float32)
    params = BinaryConvParams(rng.standard_normal(g.weight_shape).astype(np.float32))
    xb = bit_pack(x)
    w_eff = bit_unpack(params.packed_signs, np.float32)
    got = conv2d_bit(xb, params, g)
    want = conv2d_fp(x, w_eff, g, pad_value=-1.0) * np.float32(params.scale)
    deviation = float(np.max(np.abs(got - want)))

    def timed(fn):
        t0 = time.perf_counter_ns()
        for _ in range(reps):
            fn()
        return (time.perf_counter_ns() - t0) / reps

    ns_fp = timed(lambda: conv2d_fp(x, w_eff, g, pad_value=-1.0))
    ns_bit = timed(lambda: conv2d_bit(xb, params, g))
    name = f"c{g.c_in}x{g.c_out}_k{g.k}_s{g.stride}_p{g.padding}_{g.h}x{g.w}"
    return {"geometry": name, "ns_fp": ns_fp, "ns_bit": ns_bit, "speedup": ns_fp / ns_bit,
            "model_speedup": 64, "deviation": deviation}


def cmd_bench_kernel(args) -> int:
    g = ConvGeometry(args.c_in, args.c_out or args.c_in, args.k, args.stride,
                     args.k // 2 if args.padding is None else args.padding, args.size, args.size)
    row = bench_row(g, args.repetitions, args.seed)
    write_csv(args.out, BENCH_COLUMNS, [row])
    print(f"{row['geometry']}: fp {row['ns_fp'] / 1e3:.1f} us, bit {row['ns_bit'] / 1e3:.1f} us, "
          f"deviation {row['deviation']}")
    return 0 if row["deviation"] == 0 else 1


# ---------------------------------------------------------------------------
# train / evaluate


def report_rows(rep: TrainReport) -> list[dict]:
    rows = [{"record": "loss", "index": i, "value": v} for i, v in enumerate(rep.losses)]
    rows += [{"record": "iou", "index": c, "value": v} for c, v in enumerate(rep.per_class_iou)]
    rows += [
        {"record": "miou", "index": "", "value": rep.miou},
        {"record": "baseline_miou", "index": "", "value": rep.baseline_miou},
        {"record": "wall_time", "index": "", "value": rep.wall_time},
        {"record": "seed", "index": "", "value": rep.seed},
        {"record": "config_hash", "index": "", "value": rep.config_hash},
    ]
    return rows


def read_train_report(path) -> TrainReport:
    rows = read_csv(path)
    get = {r["record"]: r["value"] for r in rows if r["index"] == ""}
    return TrainReport(
        losses=[float(r["value"]) for r in rows if r["record"] == "loss"],
        miou=float(get["miou"]),
        per_class_iou=[float(r["value"]) for r in rows if r["record"] == "iou"],
        wall_time=float(get["wall_time"]),
        seed=int(get["seed"]),
        config_hash=get["config_hash"],
        baseline_miou=float(get["baseline_miou"]),
    )


def _outputs(cfg: RunConfig, args):
    out_dir = Path(args.out_dir or cfg.get("output", "dir", "runs"))
    report = Path(cfg.get("output", "report", "train_report.csv"))
    ckpt = Path(cfg.get("output", "checkpoint", "model.bdc"))
    return out_dir / report, out_dir / ckpt


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    spec, tcfg = cfg.net_spec(), cfg.train_config()
    report_path, ckpt_path = _outputs(cfg, args)
    net = build_network(spec, seed=tcfg.seed)
    data = dataset_for(spec, tcfg)
    try:
        rep = train(net, data, tcfg, log=log.info)
    except FloatingPointError as exc:
        log.error("%s", exc)
        write_csv(report_path, REPORT_COLUMNS, [{"record": "error", "index": "", "value": str(exc)}])
        return 1
    rep.config_hash = cfg.hash
    write_csv(report_path, REPORT_COLUMNS, report_rows(rep))
    checkpoint.save(ckpt_path, checkpoint.state_records(net.params))
    print(f"mIoU {rep.miou:.4f} (majority baseline {rep.baseline_miou:.4f}); "
          f"loss {rep.losses[0]:.4f} -> {rep.losses[-1]:.4f}")
    return 0


def evaluate_checkpoint(cfg: RunConfig, ckpt_path) -> tuple[list[float], float]:
    spec, tcfg = cfg.net_spec(), cfg.train_config()
    net = build_network(spec, seed=tcfg.seed)
    checkpoint.load_into(net.params, checkpoint.load(ckpt_path))
    _, (tv, tl) = dataset_for(spec, tcfg)
    return evaluate(net, tv, tl)


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    report_path, ckpt_path = _outputs(cfg, args)
    try:
        _, mean = evaluate_checkpoint(cfg, args.checkpoint or ckpt_path)
    except CheckpointError as exc:
        print(f"checkpoint rejected: {exc}", file=sys.stderr)
        return 1
    print(f"mIoU {mean!r}")
    if report_path.exists():
        recorded = read_train_report(report_path).miou
        if not (mean == recorded or (math.isnan(mean) and math.isnan(recorded))):
            print(f"mismatch with recorded mIoU {recorded!r}", file=sys.stderr)
            return 1
    return 0


# ---------------------------------------------------------------------------
# ablate


def _ablate_one(job):
    table, label, unit, spec, tcfg = job
    return ablate([(label, unit)], spec, tcfg, table)[0]


def ablation_rows(tables, spec: NetSpec, tcfg, workers: int = 1) -> list[dict]:
    jobs = [(t, label, unit, spec, tcfg) for t in tables for label, unit in ABLATIONS[t]]
    if workers <= 1:
        return [_ablate_one(j) for j in jobs]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(_ablate_one, jobs))


def cmd_ablate(args) -> int:
    cfg = load_config(args.config) if args.config else parse_config("")
    spec, tcfg = cfg.net_spec(), cfg.train_config()
    if args.steps is not None:
        tcfg = type(tcfg)(**{**tcfg.__dict__, "steps": args.steps})
    tables = args.tables.split(",")
    unknown = [t for t in tables if t not in ABLATIONS]
    if unknown:
        raise ConfigError(f"unknown ablation table(s) {unknown}; choose from {list(ABLATIONS)}")
    rows = ablation_rows(tables, spec, tcfg, threads())
    write_csv(args.out, ABLATE_COLUMNS, rows)
    for r in rows:
        print(f"{r['table']:<10} {r['variant']:<8} mIoU {r['miou']:.4f}  ops {r['ops']:.0f}  "
              f"params {r['params']:.1f}")
    if any(math.isnan(r["final_loss"]) for r in rows if tcfg.steps):
        return 1
    return 0


# ---------------------------------------------------------------------------
# cost


def parse_layer(text: str) -> LayerSpec:
    """``c_in,c_out,k,stride,h,w[,b]``; a trailing ``b`` marks a binarized layer."""
    parts = [p.strip() for p in text.split(",")]
    binarized = parts[-1] == "b"
    if binarized:
        parts = parts[:-1]
    try:
        c_in, c_out, k, stride, h, w = (int(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"bad layer spec {text!r}") from exc
    return LayerSpec("layers", text, ConvGeometry(c_in, c_out, k, stride, k // 2, h, w), binarized)


def module_of(name: str) -> str:
    """``bev.0.rest.0.conv`` -> ``bev.0``; ``stem_bn`` -> ``stem``."""
    parts = name.split(".")
    for i, part in enumerate(parts):
        if part in ("first", "rest", "mul", "gate"):
            return ".".join(parts[:i])
    return name.removesuffix("_bn").removesuffix("_act")


def cost_rows(layers) -> list[dict]:
    layers = list(layers)
    total = cost_of_network(layers)
    modules: dict[str, list] = {}
    for layer in layers:
        modules.setdefault(module_of(layer.name), []).append(layer)
    rows = [{"level": "module", "name": k, **cost_of_network(v).as_row()} for k, v in modules.items()]
    rows += [{"level": "stage", "name": k, **v.as_row()} for k, v in total.breakdown.items()]
    rows.append({"level": "total", "name": "total", **total.as_row()})
    return rows


def cmd_cost(args) -> int:
    if args.empty:
        layers = []
    elif args.layer:
        layers = [parse_layer(t) for t in args.layer]
    else:
        cfg = load_config(args.config) if args.config else parse_config("")
        spec = cfg.net_spec()
        if args.scope:
            spec = NetSpec(**{**spec.__dict__, "scope": args.scope})
        layers = build_network(spec).layers()
    rows = cost_rows(layers)
    write_csv(args.out, COST_COLUMNS, rows)
    t = rows[-1]
    print(f"ops_f {t['ops_f']:.0f}  ops_b {t['ops_b']:.2f}  params_f {t['params_f']:.0f}  "
          f"params_b {t['params_b']:.2f}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bdcocc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("verify-theorem", help="binarization-error constant and gradient-error checks")
    s.add_argument("--samples", type=int, default=1_000_000, help="Monte-Carlo draws per seed")
    s.add_argument("--mc-seeds", type=int, default=1, help="number of Monte-Carlo seeds")
    s.add_argument("--trials", type=int, default=200, help="gradient-error trials per kernel size")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="theorem.csv")
    s.set_defaults(fn=cmd_verify_theorem)

    s = sub.add_parser("bench-kernel", help="time packed vs full-precision convolution")
    s.add_argument("--c-in", type=int, default=64)
    s.add_argument("--c-out", type=int, default=None)
    s.add_argument("--k", type=int, default=3, choices=(1, 3))
    s.add_argument("--stride", type=int, default=1, choices=(1, 2))
    s.add_argument("--padding", type=int, default=None)
    s.add_argument("--size", type=int, default=16)
    s.add_argument("--repetitions", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="bench.csv")
    s.set_defaults(fn=cmd_bench_kernel)

    for name, fn, helptext in (("train", cmd_train, "train the toy occupancy network"),
                               ("evaluate", cmd_evaluate, "evaluate a saved checkpoint")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", required=True)
        s.add_argument("--out-dir", default=None)
        if name == "evaluate":
            s.add_argument("--checkpoint", default=None)
        s.set_defaults(fn=fn)

    s = sub.add_parser("ablate", help="run the break-down, kernel and MulBiconv ablations")
    s.add_argument("--config", default=None)
    s.add_argument("--tables", default="breakdown,kernel,mulbiconv")
    s.add_argument("--steps", type=int, default=None, help="override training steps")
    s.add_argument("--out", default="ablation.csv")
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("cost", help="OPs/Params report")
    s.add_argument("--config", default=None)
    s.add_argument("--scope", choices=("base", "tiny", "small"), default=None)
    s.add_argument("--layer", action="append", help="c_in,c_out,k,stride,h,w[,b]")
    s.add_argument("--empty", action="store_true", help="report an empty network")
    s.add_argument("--out", default="cost.csv")
    s.set_defaults(fn=cmd_cost)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.fn(args)
    except (ConfigError, BDCError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
