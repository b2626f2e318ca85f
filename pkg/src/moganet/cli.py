"""Command-line surface.

Subcommands: summarize, gradcheck, train, eval, interact.  Exit codes:
0 success, 2 usage or data-format error, 3 numeric failure (gradient check
over tolerance, divergent training).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import gradcheck as gc
from .blocks import (CABlockParams, FDParams, MogaParams, MultiOrderDWParams,
                     SABlockParams, StemParams, ca_block, ca_module,
                     fd_forward, moga_forward, multi_order_dw, sa_block,
                     stem_forward)
from .errors import FormatError, ShapeError
from .interaction import (InteractionConfig, brute_force_I_set, estimate_I_set,
                          compute_baseline, estimate_J, make_set_score,
                          order_grid)
from .model import (build, count_macs, forward, named_buffers,
                    named_parameters, preset, preset_names)
from .serialization import load_checkpoint, load_dataset, save_dataset
from .tensor import Tensor, linear, softmax_xent, tmean, tsum
from .train import (Dataset, TrainingDiverged, evaluate, synth_dataset,
                    train_loop)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


def _fail(msg: str, code: int) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


# ---------------------------------------------------------------------------
# summarize
# ---------------------------------------------------------------------------

def cmd_summarize(args) -> int:
    try:
        cfg = preset(args.preset)
    except ValueError as e:
        return _fail(str(e), EXIT_USAGE)
    report = count_macs(cfg, args.resolution, args.resolution)
    if args.format == "json":
        print(report.to_json())
    elif args.format == "csv":
        print(report.to_csv(), end="")
    else:
        print(f"{'layer':8s} {'path':42s} {'params':>12s} {'macs':>16s}")
        for r in report.rows:
            print(f"{r.kind:8s} {r.path:42s} {r.params:12d} {r.macs:16d}")
        print(f"{'total':8s} {'':42s} {report.total_params:12d} {report.total_macs:16d}")
        print(f"\npreset {cfg.name} @ {args.resolution}x{args.resolution}: "
              f"{report.total_params / 1e6:.2f}M params, "
              f"{report.total_macs / 1e9:.2f}G MACs")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def block_gradchecks(seed: int, coords_per_tensor: int = 6):
    """Finite-difference checks for every block type plus the end-to-end
    model, all at f64.  Yields (name, max scaled relative error)."""
    rng = np.random.default_rng(seed)
    sub = np.random.default_rng(seed + 1)
    dt = np.float64

    def T(shape):
        return Tensor(rng.uniform(-1, 1, shape), dtype="f64", requires_grad=True)

    def params_of(obj, skip=("running_mean", "running_var")):
        out = []
        stack = [obj]
        while stack:
            o = stack.pop()
            if isinstance(o, Tensor):
                out.append(o)
            elif isinstance(o, (list, tuple)):
                stack.extend(o)
            elif hasattr(o, "__dataclass_fields__"):
                for name in o.__dataclass_fields__:
                    if name not in skip:
                        stack.append(getattr(o, name))
        return out

    def run(name, make_loss, wrt):
        err = gc.check(make_loss, wrt, coords_per_tensor=coords_per_tensor, rng=sub)
        return name, err

    fd = FDParams.init(rng, 8, dt)
    fd.gamma_s.data[:] = rng.uniform(-1, 1, 8)
    x = T((1, 8, 4, 4))
    yield run("fd", lambda: tsum(fd_forward(fd, x)), [x] + params_of(fd))

    dw = MultiOrderDWParams.init(rng, 8, dt)
    x = T((1, 8, 6, 6))
    yield run("multi_order_dw", lambda: tsum(multi_order_dw(dw, x)), [x] + params_of(dw))

    mo = MogaParams.init(rng, 8, dt)
    x = T((1, 8, 6, 6))
    yield run("moga", lambda: tsum(moga_forward(mo, x)), [x] + params_of(mo))

    sa = SABlockParams.init(rng, 8, dt)
    sa.fd.gamma_s.data[:] = rng.uniform(-1, 1, 8)
    x = T((2, 8, 4, 4))
    yield run("sa_block", lambda: tsum(sa_block(sa, x, True)), [x] + params_of(sa))

    wr_w, wr_b = T((1, 16, 1, 1)), T((1,))
    gamma_c = T((16,))
    x = T((1, 16, 3, 3))
    yield run("ca_module", lambda: tsum(ca_module(wr_w, wr_b, gamma_c, x)),
              [x, wr_w, wr_b, gamma_c])

    ca = CABlockParams.init(rng, 16, 2, dt)
    ca.gamma_c.data[:] = rng.uniform(-1, 1, 32)
    x = T((1, 16, 3, 3))
    yield run("ca_block", lambda: tsum(ca_block(ca, x, True)), [x] + params_of(ca))

    st = StemParams.init_stage1(rng, 8, dt)
    x = T((1, 3, 8, 8))
    yield run("stem", lambda: tsum(stem_forward(st, x, True)), [x] + params_of(st))

    hw, hb = T((5, 12)), T((5,))
    x = T((3, 12))
    labels = np.array([0, 2, 4])
    yield run("head", lambda: softmax_xent(linear(x, hw, hb), labels, 0.1),
              [x, hw, hb])


def end_to_end_gradcheck(preset_name: str, seed: int, coords: int = 48) -> float:
    """Finite differences of the mean logit w.r.t. the input image on an f64
    model in eval mode (training-mode batch statistics are undefined once
    stage 4 reaches a 1x1 map at batch 1).  The learned scale vectors and
    running statistics are randomized so the decomposition and reallocation
    paths, inert at zero init, contribute to the gradient."""
    rng = np.random.default_rng(seed)
    model = build(preset(preset_name), seed=seed, dtype="f64")
    for path, t in named_parameters(model):
        if path.endswith(("gamma_s", "gamma_c")):
            t.data = rng.uniform(-0.5, 0.5, t.data.shape)
    for path, buf in named_buffers(model):
        if path.endswith("running_mean"):
            buf[...] = rng.uniform(-0.2, 0.2, buf.shape)
        else:
            buf[...] = rng.uniform(0.5, 1.5, buf.shape)
    x = Tensor(rng.uniform(-1, 1, (1, 3, 32, 32)), dtype="f64", requires_grad=True)

    def loss():
        return tmean(forward(model, x, training=False))

    return gc.check(loss, [x], coords_per_tensor=coords, rng=np.random.default_rng(seed + 1))


def cmd_gradcheck(args) -> int:
    if args.tolerance <= 0:
        return _fail("tolerance must be > 0", EXIT_USAGE)
    if args.dtype != "f64":
        return _fail("gradient checking runs at f64 (f32 cannot reach the tolerance)", EXIT_USAGE)
    results = list(block_gradchecks(args.seed))
    results.append(("end_to_end", end_to_end_gradcheck(args.preset, args.seed)))
    # the deep composition gets a 10x looser gate than individual blocks
    e2e_tol = 10.0 * args.tolerance
    rows = []
    ok_all = True
    for name, err in results:
        tol = e2e_tol if name == "end_to_end" else args.tolerance
        ok = err <= tol
        ok_all &= ok
        rows.append({"block": name, "max_rel_err": err, "tolerance": tol, "pass": ok})
    if args.format == "json":
        print(json.dumps({"results": rows, "pass": ok_all}, indent=2))
    else:
        for r in rows:
            print(f"{r['block']:16s} max_rel_err {r['max_rel_err']:.3e} "
                  f"tol {r['tolerance']:.0e}  {'PASS' if r['pass'] else 'FAIL'}")
    return EXIT_OK if ok_all else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# train / eval
# ---------------------------------------------------------------------------

def _load_dataset_arg(path) -> Dataset:
    images, labels, num_classes = load_dataset(path)
    return Dataset(images=images, labels=labels, num_classes=num_classes)


def cmd_train(args) -> int:
    try:
        cfg = preset(args.preset)
    except ValueError as e:
        return _fail(str(e), EXIT_USAGE)
    try:
        if args.data:
            data = _load_dataset_arg(args.data)
        else:
            data = synth_dataset(args.synth, count=args.count, classes=args.classes,
                                 h=args.size, w=args.size, seed=args.seed)
    except (FormatError, ValueError, OSError) as e:
        return _fail(str(e), EXIT_USAGE)

    os.makedirs(args.out, exist_ok=True)
    if not args.data:
        save_dataset(os.path.join(args.out, "train.mgds"), data.images,
                     data.labels, data.num_classes)

    def log(row):
        if not args.quiet:
            val = "" if row["val_acc"] is None else f" val {row['val_acc']:.3f}"
            print(f"epoch {row['epoch']:4d} step {row['step']:6d} "
                  f"lr {row['lr']:.2e} loss {row['loss']:.4f} "
                  f"acc {row['train_acc']:.3f}{val}")

    try:
        model, metrics = train_loop(cfg, data, epochs=args.epochs, seed=args.seed,
                                    batch_size=args.batch, out_dir=args.out,
                                    flip=args.flip, log=log)
    except TrainingDiverged as e:
        return _fail(str(e), EXIT_NUMERIC)
    final = metrics[-1]
    summary = {"epochs": args.epochs, "final_loss": final["loss"],
               "final_train_acc": final["train_acc"],
               "checkpoint": os.path.join(args.out, "checkpoint.moga"),
               "metrics": os.path.join(args.out, "metrics.csv")}
    if args.format == "json":
        print(json.dumps(summary, indent=2))
    else:
        print(f"done: train top-1 {final['train_acc']:.4f}, "
              f"checkpoint at {summary['checkpoint']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        ckpt = load_checkpoint(args.ckpt)
        data = _load_dataset_arg(args.data)
    except (FormatError, OSError) as e:
        return _fail(str(e), EXIT_USAGE)
    acc = evaluate(ckpt.model, data, batch_size=args.batch)
    if args.format == "json":
        print(json.dumps({"top1": acc, "count": len(data)}))
    else:
        print(f"top-1 accuracy: {acc:.4f} over {len(data)} samples")
    return EXIT_OK


# ---------------------------------------------------------------------------
# interact
# ---------------------------------------------------------------------------

def _parse_grid(text):
    if "x" in text:
        gh, gw = text.split("x", 1)
        return int(gh), int(gw)
    return int(text)


def cmd_interact(args) -> int:
    try:
        ckpt = load_checkpoint(args.ckpt)
        images, labels, _ = load_dataset(args.data)
    except (FormatError, OSError) as e:
        return _fail(str(e), EXIT_USAGE)
    grid = _parse_grid(args.grid)
    n = (grid * grid) if isinstance(grid, int) else grid[0] * grid[1]
    fractions = [float(t) for t in args.orders.split(",") if t]
    try:
        orders = order_grid(n, fractions)
        cfg = InteractionConfig(grid=grid, images=images[:args.samples],
                                labels=labels[:args.samples], orders=orders,
                                pairs_per_order=args.pairs,
                                contexts_per_pair=args.contexts,
                                baseline=args.baseline, seed=args.seed)
        cfg.validate()
    except ValueError as e:
        return _fail(str(e), EXIT_USAGE)

    report = estimate_J(ckpt.model, cfg)
    base = args.out
    with open(base + ".csv", "w") as f:
        f.write(report.to_csv())
    with open(base + ".json", "w") as f:
        f.write(report.to_json())

    if args.oracle:
        # cross-check MC against enumeration on a 6-patch sub-universe
        universe = list(range(6))
        baseline = compute_baseline(cfg.images, cfg.baseline)
        f_set = make_set_score(ckpt.model, cfg.images[0], int(cfg.labels[0]),
                               grid, baseline)
        print("oracle cross-check (6-patch universe, pair (0, 1)):")
        for m in range(5):
            brute = brute_force_I_set(f_set, universe, 0, 1, m)
            rng = np.random.default_rng(args.seed)
            runs = [estimate_I_set(f_set, universe, 0, 1, m, K=5, rng=rng)
                    for _ in range(50)]
            se = float(np.std(runs, ddof=1) / math.sqrt(len(runs))) if m else 0.0
            dev = abs(float(np.mean(runs)) - brute)
            status = "PASS" if dev <= max(4 * se, 1e-12) else "FAIL"
            print(f"  m={m}: brute {brute:+.6e}  mc mean {np.mean(runs):+.6e} "
                  f"(4*SE {4 * se:.2e})  {status}")

    if args.format == "json":
        print(report.to_json())
    else:
        print(f"wrote {base}.csv and {base}.json "
              f"(mean J = {float(np.mean(report.J)) if report.J else 0.0:.9f}, "
              f"degenerate={report.degenerate})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moganet",
                                description="multi-order gated aggregation network toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("summarize", help="per-layer parameter and MAC counts")
    s.add_argument("--preset", required=True, help=f"one of {', '.join(preset_names())}")
    s.add_argument("--resolution", type=int, default=224)
    s.add_argument("--format", choices=("table", "csv", "json"), default="table")
    s.set_defaults(func=cmd_summarize)

    s = sub.add_parser("gradcheck", help="finite-difference checks per block")
    s.add_argument("--preset", default="nano")
    s.add_argument("--dtype", default="f64")
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--format", choices=("table", "json"), default="table")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("train", help="desk-scale supervised training")
    s.add_argument("--preset", default="nano")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="dataset file (.mgds)")
    src.add_argument("--synth", choices=("stripes", "blobs"), help="generate synthetic data")
    s.add_argument("--count", type=int, default=64)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--batch", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--flip", action="store_true", help="random horizontal flips")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--quiet", action="store_true")
    s.add_argument("--format", choices=("table", "json"), default="table")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--batch", type=int, default=64)
    s.add_argument("--format", choices=("table", "json"), default="table")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("interact", help="multi-order interaction strength report")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--grid", default="4", help="g for g x g, or RxC (e.g. 2x4)")
    s.add_argument("--orders", default="0.05,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,0.95",
                   help="comma-separated fractional orders in (0, 1)")
    s.add_argument("--pairs", type=int, default=4)
    s.add_argument("--contexts", type=int, default=4)
    s.add_argument("--samples", type=int, default=4, help="images to analyze")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--baseline", choices=("mean", "zero"), default="mean")
    s.add_argument("--oracle", action="store_true",
                   help="brute-force cross-check on a 6-patch sub-universe")
    s.add_argument("--out", required=True, help="report path stem")
    s.add_argument("--format", choices=("table", "json"), default="table")
    s.set_defaults(func=cmd_interact)

    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    if getattr(args, "baseline", None) == "mean":
        args.baseline = "dataset_mean"
    try:
        return args.func(args)
    except (ShapeError, FormatError) as e:
        return _fail(str(e), EXIT_USAGE)


if __name__ == "__main__":
    sys.exit(main())
