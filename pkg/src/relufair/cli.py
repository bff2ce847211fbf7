"""Command-line interface.

Verbs: train, linearize, mitigate, audit, theory, report.  Exit codes:
0 success, 2 configuration error, 3 numeric failure, 4 I/O failure.
RELUFAIR_OUT overrides --out which overrides the config's out_dir.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

from . import pipeline, svgplot, theory
from .autodiff import NumericError
from .config import ConfigError, ExperimentConfig, load_config
from .trainer import TrainingError
from .audit import AuditError


def _build_parser() -> argparse.ArgumentParser:
    # global flags live on a parent so they parse both before and after the
    # verb; SUPPRESS keeps a subparser from clobbering a value given earlier
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", metavar="PATH", help="experiment TOML")
    common.add_argument("--out", metavar="DIR", help="override the config out_dir")
    common.add_argument("--seeds", metavar="LIST",
                        help="comma-separated seed override, e.g. 0,1,2")
    common.add_argument("--jobs", type=int, metavar="N", help="parallel seed jobs")
    common.add_argument("--no-finetune", action="store_true", dest="no_finetune",
                        help="skip distillation after linearization")

    parser = argparse.ArgumentParser(
        prog="relufair", parents=[common],
        description="Train dense nets, linearize rectifier units under a budget, "
                    "and audit the per-group accuracy impact.")
    sub = parser.add_subparsers(dest="verb", required=True)

    sub.add_parser("train", parents=[common],
                   help="train the all-rectifier base model per seed")
    lin = sub.add_parser("linearize", parents=[common],
                         help="apply the budgeted gate schemes")
    lin.add_argument("--checkpoint", default=None,
                     help="explicit base checkpoint path")
    mit = sub.add_parser("mitigate", parents=[common],
                         help="fairness-regularized finetuning")
    mit.add_argument("--checkpoint", default=None,
                     help="explicit linearized checkpoint path")
    aud = sub.add_parser("audit", parents=[common],
                         help="per-group metrics and bound diagnostics")
    aud.add_argument("--base", default=None, help="explicit base checkpoint path")
    aud.add_argument("--candidates", nargs="+", default=None,
                     help="explicit candidate checkpoints")
    thy = sub.add_parser("theory", parents=[common],
                         help="approximation-rate and region-count checks")
    thy.add_argument("--fn", default="square,exp,softplus",
                     help="comma-separated function names")
    thy.add_argument("--ns", default="1,2,4,8,16",
                     help="comma-separated segment counts (geometric)")
    sub.add_parser("report", parents=[common],
                   help="aggregate per-seed audits into tables and figures")
    return parser


def _resolve_config(args) -> ExperimentConfig:
    config_path = getattr(args, "config", None)
    if not config_path:
        raise ConfigError("--config is required for this command")
    cfg = load_config(config_path)
    out = os.environ.get("RELUFAIR_OUT") or getattr(args, "out", None)
    if out:
        cfg = dataclasses.replace(cfg, out_dir=out)
    seeds_arg = getattr(args, "seeds", None)
    if seeds_arg:
        try:
            seeds = tuple(int(s) for s in seeds_arg.split(","))
        except ValueError as exc:
            raise ConfigError(f"--seeds: {exc}") from exc
        cfg = dataclasses.replace(cfg, seeds=seeds)
    return cfg


def _cmd_theory(args) -> int:
    out_dir = os.environ.get("RELUFAIR_OUT") or getattr(args, "out", None) or "runs/theory"
    names = [s.strip() for s in args.fn.split(",") if s.strip()]
    ns = [int(s) for s in args.ns.split(",") if s.strip()]
    domains = {"square": (0.0, 1.0), "exp": (0.0, 2.0), "softplus": (-2.0, 2.0)}
    series = []
    for name in names:
        fn = theory.ConvexFn1D(name, domains.get(name, (0.0, 1.0)))
        result = theory.rate_check(fn, ns) if len(ns) >= 4 else \
            {"slope": float("nan"),
             "errors": [theory.best_pwl_error(fn, n)["error"] for n in ns]}
        rows = ["n,error"] + [f"{n},{repr(e)}" for n, e in zip(ns, result["errors"])]
        pipeline.atomic_write_text(os.path.join(out_dir, f"rate_{name}.csv"),
                                   "\n".join(rows) + "\n")
        series.append((f"{name} (slope {result['slope']:.3f})", ns, result["errors"]))
        print(f"{name}: slope {result['slope']:.4f}")
    pipeline.atomic_write_text(
        os.path.join(out_dir, "rate_loglog.svg"),
        svgplot.line_plot(series, "Best piecewise-linear error vs segments",
                          "segments n", "uniform error", logx=True, logy=True))

    # region counting: the two-unit worked example plus random soundness rows
    import numpy as np
    W0 = np.array([[1.0, -1.0]]); b0 = np.array([-1.0, -1.0])
    W1 = np.array([[1.0], [1.0]]); b1 = np.array([0.0])
    pair = theory.ScalarReluNet((2,), (W0, W1), (b0, b1), ((1, 1),))
    rows = ["name,widths,regions,bound"]
    for label, net in (("two_unit_rectified", pair),
                       ("two_unit_one_linear", pair.with_gate(0, 0, 0))):
        count = theory.count_linear_regions(net, (-3.0, 3.0))
        rows.append(f"{label},\"(2,)\",{count},{theory.region_upper_bound((2,))}")
        print(f"{label}: {count} regions (bound {theory.region_upper_bound((2,))})")
    rng = np.random.default_rng(0)
    for i in range(10):
        k = int(rng.integers(1, 4))
        widths = tuple(int(rng.integers(1, 9)) for _ in range(k))
        net = theory.ScalarReluNet.random(widths, seed=100 + i)
        count = theory.count_linear_regions(net, (-2.0, 2.0))
        rows.append(f"random_{i},\"{widths}\",{count},{theory.region_upper_bound(widths)}")
    pipeline.atomic_write_text(os.path.join(out_dir, "regions.csv"),
                               "\n".join(rows) + "\n")
    print(f"wrote {out_dir}/rate_*.csv, rate_loglog.svg, regions.csv")
    return 0


def _dispatch(args) -> int:
    if args.verb == "theory":
        return _cmd_theory(args)
    cfg = _resolve_config(args)
    seeds = list(cfg.seeds)
    if args.verb == "train":
        paths = pipeline.run_stage(cfg, "train", seeds, jobs=getattr(args, "jobs", 1))
    elif args.verb == "linearize":
        paths = pipeline.run_stage(cfg, "linearize", seeds, jobs=getattr(args, "jobs", 1),
                                   no_finetune=getattr(args, "no_finetune", False),
                                   base_checkpoint=args.checkpoint)
    elif args.verb == "mitigate":
        if not cfg.mitigation.enabled:
            raise ConfigError("mitigation.enabled: must be true for the mitigate verb")
        paths = pipeline.run_stage(cfg, "mitigate", seeds, jobs=getattr(args, "jobs", 1),
                                   linearized_checkpoint=args.checkpoint)
    elif args.verb == "audit":
        paths = pipeline.run_stage(cfg, "audit", seeds, jobs=getattr(args, "jobs", 1),
                                   base_checkpoint=args.base,
                                   candidate_paths=args.candidates)
    elif args.verb == "report":
        paths = pipeline.stage_report(cfg, seeds)
        pipeline.update_manifest(cfg, "report", paths)
    else:  # pragma: no cover - argparse enforces the verb set
        raise ConfigError(f"unknown verb {args.verb!r}")
    for p in paths:
        print(p)
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, NumericError, AuditError, theory.TheoryError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (OSError, pipeline.PipelineError) as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
