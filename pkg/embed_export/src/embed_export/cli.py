"""Command-line entry point.

``embed-export INPUT CHECKPOINT OUT_PREFIX`` encodes the input records
and writes ``<prefix>.jsonl``, ``<prefix>.emb``, and (when the input is
fully labeled) ``<prefix>.lbl``.  On success the run summary is printed
to stdout as one JSON line.
"""

from __future__ import annotations

import argparse
import json
import sys

from embed_export.export import ExportJob, export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embed-export",
        description="Encode JSON-lines text records with a pretrained "
                    "checkpoint and write interchange files.")
    parser.add_argument("input",
                        help="JSON-lines text records: {id, text, label?}")
    parser.add_argument("checkpoint",
                        help="pretrained encoder checkpoint (local path or identifier)")
    parser.add_argument("out_prefix",
                        help="output prefix; writes <prefix>.jsonl/.emb/.lbl")
    parser.add_argument("--normalize", action="store_true",
                        help="L2-normalize the pooled sentence vectors")
    parser.add_argument("--batch-size", type=int, default=32,
                        help="texts encoded per forward pass (default 32)")
    parser.add_argument("--token-level", action="store_true",
                        help="emit per-token vectors in the record lines "
                             "instead of pooled sentence vectors")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        job = ExportJob(
            input_path=args.input,
            checkpoint=args.checkpoint,
            records_path=args.out_prefix + ".jsonl",
            matrix_path=args.out_prefix + ".emb",
            labels_path=args.out_prefix + ".lbl",
            batch_size=args.batch_size,
            normalize=args.normalize,
            token_level=args.token_level,
        )
        summary = export(job)
    except (ValueError, RuntimeError) as exc:
        print(f"embed-export: error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
