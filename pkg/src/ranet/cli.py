"""Command line entry point: ``ranet <verb> [flags]``."""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from . import calibration as cal
from .checkpoint import load_checkpoint, save_checkpoint
from .config import resolve_config
from .data import load_cifar10_dir, normalize, split_holdout, synthetic_splits
from .errors import RANetError, UsageError
from .inference import forward_anytime, write_traces
from .network import build_graph
from .training import TrainConfig, accuracies, train

OUT_DIR_ENV = "RANET_OUT_DIR"
DEFAULT_OUT_DIR = "ranet-out"
CHECKPOINT_NAME = "checkpoint.rnt"


def _data_spec(args):
    if args.data == "synthetic":
        return {"kind": "synthetic", "seed": args.seed, "n_train": args.n_train, "n_val": args.n_val,
                "n_test": args.n_test, "difficulty": args.difficulty}
    if args.data.startswith("cifar10:"):
        return {"kind": "cifar10", "dir": args.data.split(":", 1)[1], "holdout": args.holdout, "seed": args.seed}
    raise UsageError(f"--data must be 'synthetic' or 'cifar10:<dir>', got {args.data!r}")


def load_data(spec, cfg):
    """DatasetSplit (raw pixels) described by a data spec dictionary."""
    if spec["kind"] == "synthetic":
        return synthetic_splits(spec["seed"], spec["n_train"], spec["n_val"], spec["n_test"],
                                cfg.num_classes, cfg.input_resolution, spec["difficulty"])
    train_set, test_set = load_cifar10_dir(spec["dir"])
    split = split_holdout(train_set, spec["holdout"], spec["seed"])
    split.test = test_set
    return split


def _out_dir(args):
    out = Path(args.out_dir or os.environ.get(OUT_DIR_ENV) or DEFAULT_OUT_DIR)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_checkpoint(args):
    if not args.checkpoint:
        raise UsageError(f"{args.verb} needs --checkpoint")
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint {args.checkpoint} does not exist")
    ckpt = load_checkpoint(args.checkpoint)
    meta = ckpt.metadata
    if "data" not in meta or "mean" not in meta:
        raise UsageError(f"checkpoint {args.checkpoint} carries no data description; was it written by 'train'?")
    return ckpt, meta


def _eval_sets(ckpt, meta):
    split = load_data(meta["data"], ckpt.graph.config)
    mean, std = np.array(meta["mean"]), np.array(meta["std"])
    val = normalize(split.validation.images, mean, std), split.validation.labels
    test = normalize(split.test.images, mean, std), split.test.labels
    return val, test


def cmd_train(args):
    cfg = resolve_config(args.config, args.step_mode)
    graph = build_graph(cfg, seed=args.seed)
    spec = _data_spec(args)
    tcfg = TrainConfig.desk_recipe(seed=args.seed)
    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
        overrides["lr_milestones"] = (args.epochs // 2, (3 * args.epochs + 3) // 4) if args.epochs >= 4 else ()
    if args.milestones is not None:
        overrides["lr_milestones"] = tuple(int(v) for v in args.milestones.split(",") if v)
    if args.lr is not None:
        overrides["initial_lr"] = args.lr
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    if overrides:
        tcfg = TrainConfig(**{**tcfg.to_dict(), **overrides})
    out = _out_dir(args)
    split = load_data(spec, cfg)
    say = (lambda *a: None) if args.quiet else print

    def progress(e):
        say(f"epoch {e.epoch + 1}/{tcfg.epochs} lr {e.lr:.4g} loss {e.train_loss:.4f} "
            f"val acc {' '.join(f'{a:.3f}' for a in e.val_accuracy)}")

    res = train(graph, split.train, split.validation, tcfg, split.mean, split.std,
                log_path=out / "train_log.csv", progress=progress)
    val_acc = accuracies(forward_anytime(graph, normalize(split.validation.images, split.mean, split.std)),
                         split.validation.labels)
    meta = {"config": cfg.name, "data": spec, "train": tcfg.to_dict(), "seed": args.seed,
            "mean": split.mean.tolist(), "std": split.std.tolist(), "final_val_accuracy": val_acc}
    path = Path(args.checkpoint) if args.checkpoint else out / CHECKPOINT_NAME
    save_checkpoint(path, graph, meta, res.state.velocity)
    print(f"trained {cfg.name} for {tcfg.epochs} epochs ({res.steps} steps); checkpoint {path}")
    print("final validation accuracy per classifier: " + " ".join(f"{a:.4f}" for a in val_acc))
    return 0


def cmd_eval_anytime(args):
    ckpt, meta = _require_checkpoint(args)
    graph = ckpt.graph
    (xv, yv), (xt, yt) = _eval_sets(ckpt, meta)
    val_acc = accuracies(forward_anytime(graph, xv), yv)
    curve = cal.anytime_curve(graph, xt, yt)
    out = _out_dir(args)
    cal.write_anytime_csv(out / "anytime.csv", curve)
    print(f"{'classifier':>10} {'MACs':>12} {'test acc':>9} {'val acc':>8}")
    for k, ((macs, acc), va) in enumerate(zip(curve, val_acc), start=1):
        print(f"{k:>10} {macs:>12} {acc:>9.4f} {va:>8.4f}")
    recorded = meta.get("final_val_accuracy")
    if recorded is not None:
        status = "matches" if recorded == val_acc else "DIFFERS FROM"
        print(f"validation accuracy {status} the value recorded at training time")
    return 0


def _budgets(args, graph):
    if not args.budgets:
        raise UsageError("--budgets is required (comma-separated)")
    try:
        values = [float(v) for v in args.budgets.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"cannot parse --budgets {args.budgets!r}") from exc
    return cal.resolve_budgets(values, graph.count_flops(graph.num_classifiers), args.budget_unit)


def _calibrate(graph, xv, yv, budgets):
    trace = cal.collect_validation_traces(graph, xv, yv)
    rows = []
    for b in budgets:
        eps = cal.threshold_for_budget(trace, b)
        rows.append((b, eps, cal.expected_cost(trace, eps)))
    return rows


def cmd_calibrate(args):
    ckpt, meta = _require_checkpoint(args)
    graph = ckpt.graph
    (xv, yv), _ = _eval_sets(ckpt, meta)
    rows = _calibrate(graph, xv, yv, _budgets(args, graph))
    out = _out_dir(args)
    with (out / "calibration.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["budget", "epsilon", "expected_val_macs"])
        for b, eps, cost in rows:
            w.writerow([f"{b:.1f}", f"{eps:.10f}", f"{cost:.3f}"])
    print(f"{'budget':>14} {'epsilon':>12} {'expected MACs':>14}")
    for b, eps, cost in rows:
        print(f"{b:>14.1f} {eps:>12.6f} {cost:>14.1f}")
    return 0


def cmd_eval_budgeted(args):
    ckpt, meta = _require_checkpoint(args)
    graph = ckpt.graph
    (xv, yv), (xt, yt) = _eval_sets(ckpt, meta)
    rows = _calibrate(graph, xv, yv, _budgets(args, graph))
    out = _out_dir(args)
    reports = []
    for i, (b, eps, cost) in enumerate(rows):
        rep, traces = cal.evaluate_budgeted(graph, xt, yt, eps, b, cost)
        reports.append(rep)
        if args.traces:
            write_traces(out / f"traces_{i + 1}.csv", traces, yt)
    cal.export_reports(out, cal.anytime_curve(graph, xt, yt), reports)
    print(f"{'budget':>14} {'epsilon':>12} {'accuracy':>9} {'avg MACs':>12}  exits")
    for r in reports:
        print(f"{r.budget:>14.1f} {r.epsilon:>12.6f} {r.accuracy:>9.4f} {r.avg_cost:>12.1f}  "
              + " ".join(str(h) for h in r.histogram))
    return 0


def cmd_flops(args):
    graph = build_graph(resolve_config(args.config, args.step_mode), seed=args.seed)
    out = _out_dir(args)
    with (out / "flops.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["classifier", "macs"])
        for k in range(1, graph.num_classifiers + 1):
            w.writerow([k, graph.count_flops(k)])
    print(f"{graph.config.name}: {graph.num_classifiers} classifiers, {graph.num_parameters()} parameters")
    print(f"{'classifier':>10} {'MACs':>14}")
    for k in range(1, graph.num_classifiers + 1):
        print(f"{k:>10} {graph.count_flops(k):>14}")
    return 0


def cmd_export_graph(args):
    graph = build_graph(resolve_config(args.config, args.step_mode), seed=args.seed)
    out = _out_dir(args)
    (out / "graph.txt").write_text(graph.summary())
    (out / "config.yaml").write_text(graph.config.to_yaml())
    print(f"wrote {out / 'graph.txt'} and {out / 'config.yaml'}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval-anytime": cmd_eval_anytime,
    "eval-budgeted": cmd_eval_budgeted,
    "calibrate": cmd_calibrate,
    "flops": cmd_flops,
    "export-graph": cmd_export_graph,
}


def build_parser():
    p = argparse.ArgumentParser(prog="ranet", description="Resolution-adaptive multi-exit CNN toolkit.")
    sub = p.add_subparsers(dest="verb", required=True)
    for verb in COMMANDS:
        s = sub.add_parser(verb)
        s.add_argument("--config", default="mini", help="preset name or YAML file")
        s.add_argument("--step-mode", choices=("even", "lg"), default=None)
        s.add_argument("--checkpoint", default=None)
        s.add_argument("--out-dir", default=None, help=f"defaults to ${OUT_DIR_ENV} or ./{DEFAULT_OUT_DIR}")
        s.add_argument("--seed", type=int, default=0)
        if verb == "train":
            s.add_argument("--data", default="synthetic", help="'synthetic' or 'cifar10:<dir>'")
            s.add_argument("--epochs", type=int, default=None)
            s.add_argument("--milestones", default=None, help="comma-separated epochs")
            s.add_argument("--lr", type=float, default=None)
            s.add_argument("--batch-size", type=int, default=None)
            s.add_argument("--difficulty", type=float, default=0.3)
            s.add_argument("--n-train", type=int, default=2000)
            s.add_argument("--n-val", type=int, default=500)
            s.add_argument("--n-test", type=int, default=500)
            s.add_argument("--holdout", type=int, default=5000)
            s.add_argument("--quiet", action="store_true")
        if verb in ("calibrate", "eval-budgeted"):
            s.add_argument("--budgets", default="0.25,0.5,0.75,1.0")
            s.add_argument("--budget-unit", choices=("fraction", "macs"), default="fraction")
        if verb == "eval-budgeted":
            s.add_argument("--traces", action="store_true", help="write per-sample exit traces")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.verb](args)
    except RANetError as exc:
        print(f"ranet {args.verb}: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"ranet {args.verb}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
