"""Command-line interface.

Subcommands: distill, eval, baseline, linear-check, poison, pretrain-pool,
export-images.  Exit codes: 0 success, 1 validation error, 2 numeric
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from . import baselines, data, distillation, harness, linear_case, models
from .errors import DistillError, NumericError


def _load_config(args) -> harness.ExperimentConfig:
    cfg = harness.ExperimentConfig.from_json(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if getattr(args, "mnist_images", None):
        cfg.data["images"] = args.mnist_images
    if getattr(args, "mnist_labels", None):
        cfg.data["labels"] = args.mnist_labels
    if getattr(args, "pool", None):
        cfg.init["path"] = args.pool
    return cfg


def _add_common(p):
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", default=None, help="override output directory")
    p.add_argument("--mnist-images", default=None, help="override train images path")
    p.add_argument("--mnist-labels", default=None, help="override train labels path")
    p.add_argument("--pool", default=None, help="override pretrained pool path")


def cmd_distill(args) -> int:
    cfg = _load_config(args)
    artifacts = harness.run_distill(cfg)
    rep = artifacts["eval_report"]
    print(f"distilled -> {artifacts['distilled']}")
    print(f"held-out accuracy: {rep.mean:.4f} +/- {rep.std:.4f} "
          f"(pool of {len(rep.accuracies)}; desk-scale run)")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    report = harness.run_eval(args.distilled, cfg)
    report.write_csv(args.report_out)
    print(f"eval -> {args.report_out}: {report.mean:.4f} +/- {report.std:.4f}")
    return 0


def cmd_baseline(args) -> int:
    cfg = _load_config(args)
    model = harness.build_model(cfg.model)
    init = harness.build_init(cfg.init, model)
    train, test = harness.load_datasets(cfg.data)
    evalset = test if test is not None else train
    dc = harness.build_distill_config(cfg.distill, cfg.seed)
    per_class = args.per_class
    if args.kind == "random_real":
        base = baselines.select_random_real(train, per_class, cfg.seed)
    elif args.kind == "kmeans":
        base = baselines.kmeans_centroids(train, per_class, cfg.seed)
    elif args.kind == "average_real":
        base = baselines.average_real(train)
    else:
        raise DistillError(f"unknown baseline kind {args.kind!r}")
    count = 1 if isinstance(init, models.FixedSeed) else cfg.holdout_models
    pool, _ = harness.holdout_pool(init, model, dc.iterations * dc.init_samples, count)
    res = baselines.baseline_grid_eval(base, model, pool, evalset, steps=dc.steps,
                                       learned_lr=args.learned_lr)
    w = csv.writer(sys.stdout)
    w.writerow(["kind", "lr", "epochs", "mean", "std", "winner"])
    for cell in res.cells:
        w.writerow([args.kind, cell.lr, cell.epochs,
                    f"{cell.mean:.6f}", f"{cell.std:.6f}", ""])
    w.writerow([args.kind, res.best.lr, res.best.epochs,
                f"{res.best.mean:.6f}", f"{res.best.std:.6f}", "winner"])
    return 0


def cmd_linear_check(args) -> int:
    problem = data.gen_linear_problem(args.n, args.d, args.noise, args.seed)
    w = csv.writer(sys.stdout)
    w.writerow(["M", "D", "worst_gap", "feasible"])
    for m in args.m:
        rep = linear_case.verify_lower_bound(problem, m, trials=args.trials,
                                             iterations=args.iterations, seed=args.seed)
        w.writerow([rep.m, rep.d, f"{rep.worst_gap:.6e}", rep.feasible])
    return 0


def cmd_poison(args) -> int:
    cfg = _load_config(args)
    artifacts = harness.run_poison(cfg)
    rep = artifacts["eval_report"]
    att = float(np.mean([r["attack_success"] for r in rep.extra]))
    oth = float(np.mean([r["other_accuracy"] for r in rep.extra]))
    print(f"poison -> {artifacts['distilled']}")
    print(f"held-out attack_success {att:.4f}, other_accuracy {oth:.4f}")
    return 0


def cmd_pretrain_pool(args) -> int:
    cfg = _load_config(args)
    path = harness.pretrain_pool(cfg, args.count, lr=args.lr, epochs=args.epochs,
                                 path=args.pool_out)
    print(f"pool -> {path}")
    return 0


def cmd_export_images(args) -> int:
    distilled = distillation.load_distilled(args.distilled)
    paths = distillation.export_pgm(distilled, args.out_dir)
    print(f"wrote {len(paths)} PGM images to {args.out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="datadistill",
                                description="dataset distillation experiments")
    sub = p.add_subparsers(dest="cmd", required=True)

    sp = sub.add_parser("distill", help="run the meta-optimizer and evaluate")
    _add_common(sp)
    sp.set_defaults(fn=cmd_distill)

    sp = sub.add_parser("eval", help="re-evaluate a distilled-data file")
    _add_common(sp)
    sp.add_argument("--distilled", required=True)
    sp.add_argument("--report-out", default="eval.csv")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("baseline", help="grid-evaluate a real-image baseline")
    _add_common(sp)
    sp.add_argument("--kind", required=True,
                    choices=["random_real", "kmeans", "average_real"])
    sp.add_argument("--per-class", type=int, default=1)
    sp.add_argument("--learned-lr", type=float, default=None)
    sp.set_defaults(fn=cmd_baseline)

    sp = sub.add_parser("linear-check", help="empirical M >= D lower-bound table")
    sp.add_argument("--n", type=int, default=64)
    sp.add_argument("--d", type=int, default=8)
    sp.add_argument("--m", type=int, nargs="+", default=[4, 8])
    sp.add_argument("--noise", type=float, default=0.1)
    sp.add_argument("--trials", type=int, default=100)
    sp.add_argument("--iterations", type=int, default=3000)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_linear_check)

    sp = sub.add_parser("poison", help="distill a one-step poisoning batch")
    _add_common(sp)
    sp.set_defaults(fn=cmd_poison)

    sp = sub.add_parser("pretrain-pool", help="train a pool of models (DDPV file)")
    _add_common(sp)
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--lr", type=float, default=0.1)
    sp.add_argument("--epochs", type=int, default=10)
    sp.add_argument("--pool-out", default=None)
    sp.set_defaults(fn=cmd_pretrain_pool)

    sp = sub.add_parser("export-images", help="dump distilled images as PGM")
    sp.add_argument("--distilled", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(fn=cmd_export_images)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 2
    except (DistillError, ValueError, OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
