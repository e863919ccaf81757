"""Command line front end: run experiments, compare finished runs, selftest."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigError, InfeasiblePlanError, SflError
from .harness import compare_report, load_metrics_dir, run_experiment


def _cmd_run(args) -> int:
    try:
        comparison = run_experiment(args.config, args.out)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (InfeasiblePlanError, SflError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    print(f"wrote artifacts to {args.out}")
    for mode, stats in comparison["modes"].items():
        reached = (
            f"reached target in {stats['time_to_accuracy_s']:.3f}s"
            if stats["reached"]
            else "target not reached"
        )
        final = stats["final_accuracy"]
        final_txt = "n/a" if final is None else f"{final:.4f}"
        print(f"  {mode}: final accuracy {final_txt}, {reached}")
    return 0


def _cmd_compare(args) -> int:
    try:
        manifest, metrics = load_metrics_dir(args.directory)
        target = (
            args.target
            if args.target is not None
            else manifest["config"]["target_accuracy"]
        )
        summary = compare_report(metrics, target)
    except SflError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    out_path = Path(args.directory) / "comparison.json"
    out_path.write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return run_selftest(fast=args.fast)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sflsim",
        description=(
            "Deterministic split federated learning simulator with feature "
            "merging and heterogeneity-aware batch planning."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run every mode of an experiment config")
    p_run.add_argument("config", help="path to the experiment JSON")
    p_run.add_argument("--out", default="runs/latest", help="output directory")
    p_run.set_defaults(func=_cmd_run)

    p_cmp = sub.add_parser("compare", help="recompute the comparison of a run dir")
    p_cmp.add_argument("directory", help="directory written by `sflsim run`")
    p_cmp.add_argument("--target", type=float, default=None,
                       help="override the target accuracy")
    p_cmp.set_defaults(func=_cmd_compare)

    p_self = sub.add_parser("selftest", help="run the embedded oracle checks")
    p_self.add_argument("--fast", action="store_true", help="smaller sweeps")
    p_self.set_defaults(func=_cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
