"""Command-line entry point for the intent-lifecycle workflow.

    intentflow workflow --out runs/demo              # full pipeline
    intentflow pretrain --config run.ini             # one stage at a time
    intentflow detect --out runs/demo --target-tpr 0.95
    intentflow report --out runs/demo

Exit codes: 0 success, 2 configuration error, 3 stage failure,
4 missing prerequisite artifact.
"""

from __future__ import annotations

import argparse
import os
import sys
import traceback

from .workflow import (STAGE_NAMES, ConfigError, PrerequisiteError,
                       load_config, run_stage, run_workflow)

__all__ = ["main", "build_parser"]

OUT_ENV_VAR = "INTENTFLOW_OUT"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FAILURE = 3
EXIT_PREREQ = 4


def _add_common_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", default=None, metavar="FILE",
                     help="INI run configuration (optional; flags override)")
    sub.add_argument("--out", default=None, metavar="DIR",
                     help=f"run directory (default: ${OUT_ENV_VAR})")
    sub.add_argument("--seed", type=int, default=None,
                     help="override both the data seed and the training seed")
    sub.add_argument("--method", default=None,
                     choices=["scl", "ft", "both"],
                     help="training method(s) to run")
    sub.add_argument("--target-tpr", type=float, default=None, metavar="R",
                     help="detection true-positive-rate target in (0, 1]")
    sub.add_argument("--k", type=int, default=None,
                     help="number of clusters for discovery "
                          "(default: catalog's unknown-class count)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="intentflow",
        description="Train, detect, discover, and retrain an intent "
                    "classifier over embedding vectors.")
    subs = parser.add_subparsers(dest="command", required=True)
    workflow = subs.add_parser(
        "workflow", help="run every stage in order and write the report")
    _add_common_flags(workflow)
    for stage in STAGE_NAMES:
        sub = subs.add_parser(stage, help=f"run only the {stage} stage")
        _add_common_flags(sub)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {
        "out": args.out if args.out is not None else os.environ.get(OUT_ENV_VAR),
        "seed": args.seed,
        "method": args.method,
        "target_tpr": args.target_tpr,
        "k": args.k,
    }
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "workflow":
            run_workflow(cfg)
        else:
            run_stage(cfg, args.command)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PrerequisiteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        traceback.print_exc()
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
