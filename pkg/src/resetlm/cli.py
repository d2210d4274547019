"""Command-line entry point.

Subcommands mirror the pipeline stages: gen-corpus, pretrain, adapt,
finetune, eval, compare. Exit codes: 0 success, 1 configuration/validation
error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import sys

from .config import load_config
from .errors import ConfigError, ResetLMError
from . import pipeline


def _apply_overrides(cfg, args) -> None:
    if getattr(args, "out_dir", None):
        cfg.out_dir = args.out_dir
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "variant", None):
        cfg.variant = args.variant
    if getattr(args, "chat_data", None):
        cfg.chat_data = args.chat_data


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="resetlm",
        description="Pretrain with periodic embedding resets, adapt to new "
        "languages by vocabulary expansion, finetune on chat data, and "
        "compare cross-lingual transfer across arms.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="pipeline config JSON")
        p.add_argument("--out-dir", help="override output directory")
        p.add_argument("--seed", type=int, help="override global seed")

    p = sub.add_parser("gen-corpus", help="materialize the corpus manifest to disk")
    add_common(p)

    p = sub.add_parser("pretrain", help="train the base model (M_base)")
    add_common(p)
    p.add_argument("--variant", choices=["baseline", "active_forgetting"])

    p = sub.add_parser("adapt", help="vocabulary-expand and adapt a base checkpoint")
    add_common(p)
    p.add_argument("--base", required=True, help="pretrain checkpoint path")

    p = sub.add_parser("finetune", help="instruction-finetune a checkpoint on chat data")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--chat-data", help="override chat dataset path (JSONL)")

    p = sub.add_parser("eval", help="perplexity/isotropy/translation report for a checkpoint")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report", help="report output path (JSON; TSV written alongside)")

    p = sub.add_parser("compare", help="side-by-side tables and charts for several reports")
    add_common(p)
    p.add_argument("--reports", nargs="+", required=True, help="report JSON paths")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        _apply_overrides(cfg, args)
        if args.command == "gen-corpus":
            out = pipeline.cmd_gen_corpus(cfg)
            print(f"corpus written to {out}")
        elif args.command == "pretrain":
            path = pipeline.cmd_pretrain(cfg)
            print(f"base checkpoint: {path}")
        elif args.command == "adapt":
            path = pipeline.cmd_adapt(cfg, args.base)
            print(f"adapted checkpoint: {path}")
        elif args.command == "finetune":
            path = pipeline.cmd_finetune(cfg, args.checkpoint)
            print(f"finetuned checkpoint: {path}")
        elif args.command == "eval":
            report = pipeline.cmd_eval(cfg, args.checkpoint, args.report)
            print(report.to_table(), end="")
        elif args.command == "compare":
            cmp = pipeline.cmd_compare(args.reports, cfg.out_path)
            print(pipeline.comparison_table(cmp), end="")
        return 0
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 1
    except ResetLMError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
