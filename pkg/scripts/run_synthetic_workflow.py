#!/usr/bin/env python3
"""Run the full intent-lifecycle workflow on synthetic embeddings.

Generates a Gaussian intent corpus, pretrains the contrastive encoder
(and optionally the cross-entropy fine-tuning baseline), then runs the
four lifecycle tasks in order — known-intent classification, out-of-scope
detection, new-intent discovery, replay-based continual retraining — and
prints the consolidated task tables. With several seeds it also prints a
seed-averaged comparison of the two training methods.

Usage:
    python3 scripts/run_synthetic_workflow.py --out runs/demo
    python3 scripts/run_synthetic_workflow.py --out runs/sweep \
        --method both --seeds 7 11 23
"""

import argparse
import json
import statistics
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from intentflow.scl import SclConfig  # noqa: E402  (path bootstrap above)
from intentflow.workflow import (DataConfig, DiscoverConfig,  # noqa: E402
                                 WorkflowConfig, run_workflow)

KEY_METRICS = (
    ("T-1 Macro F1", "classify", ("macro_f1",)),
    ("T-2 AUROC", "detect", ("auroc",)),
    ("T-3 ACC", "discover", ("acc",)),
    ("T-4 Macro F1", "evaluate", ("overall", "macro_f1")),
)


def parse_args(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", required=True, metavar="DIR",
                        help="root directory; one run per seed is written "
                             "to DIR/seed<k>")
    parser.add_argument("--method", default="both",
                        choices=["scl", "ft", "both"])
    parser.add_argument("--seeds", type=int, nargs="+", default=[7],
                        help="one workflow run per seed (default: 7)")
    parser.add_argument("--classes", type=int, default=16)
    parser.add_argument("--per-class", type=int, default=200)
    parser.add_argument("--dim", type=int, default=32)
    parser.add_argument("--separation", type=float, default=6.0)
    parser.add_argument("--epochs", type=int, default=20)
    parser.add_argument("--target-tpr", type=float, default=0.90)
    return parser.parse_args(argv)


def build_config(args, seed: int, out: Path) -> WorkflowConfig:
    data = DataConfig(synthetic_classes=args.classes,
                      synthetic_per_class=args.per_class,
                      synthetic_dim=args.dim,
                      synthetic_separation=args.separation,
                      seed=seed)
    train = SclConfig(max_epochs=args.epochs, seed=seed,
                      target_tpr=args.target_tpr)
    return WorkflowConfig(out=out, method=args.method, data=data,
                          train=train, discover=DiscoverConfig())


def read_metric(out: Path, method: str, stage: str, keys) -> float | None:
    path = out / method / stage / "report.json"
    if not path.is_file():
        return None
    obj = json.loads(path.read_text(encoding="utf-8"))
    for key in keys:
        obj = obj[key]
    return obj


def main(argv=None) -> int:
    args = parse_args(argv)
    root = Path(args.out)
    methods = ("scl", "ft") if args.method == "both" else (args.method,)

    collected: dict[tuple[str, str], list[float]] = {}
    for seed in args.seeds:
        out = root / f"seed{seed}"
        print(f"=== seed {seed} -> {out}")
        t0 = time.perf_counter()
        run_workflow(build_config(args, seed, out))
        print(f"    finished in {time.perf_counter() - t0:.1f}s")
        for method in methods:
            for name, stage, keys in KEY_METRICS:
                value = read_metric(out, method, stage, keys)
                if value is not None:
                    collected.setdefault((method, name), []).append(value)
        print((out / "report" / "tables.txt").read_text(encoding="utf-8"))

    if len(args.seeds) > 1:
        print(f"=== mean over seeds {args.seeds}")
        width = max(len(name) for name, _, _ in KEY_METRICS)
        for method in methods:
            for name, _, _ in KEY_METRICS:
                values = collected.get((method, name), [])
                if not values:
                    continue
                spread = (statistics.stdev(values) if len(values) > 1
                          else 0.0)
                print(f"{method:>4}  {name:<{width}}  "
                      f"{statistics.mean(values):.4f} +/- {spread:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
