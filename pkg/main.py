"""
Main - Command-line entry point for the layer pruning pipeline.

    python main.py gen-corpus
    python main.py train-teacher
    python main.py importance
    python main.py prune --keep 4 [--keep 3] [--criterion cli]
    python main.py heal [--target-mode same_index] [--no-attention ...]
    python main.py eval artifacts/teacher.ckpt --label teacher
    python main.py report artifacts/reports/teacher.eval.json artifacts/reports/healed.eval.json
"""

import argparse
import sys
from typing import Optional, Sequence

from src.config import ExperimentConfig, get_settings, load_config
from src.errors import LayerPruneError
from src.logger import get_logger, setup_logger
from src.pipeline import (
    cmd_eval,
    cmd_gen_corpus,
    cmd_heal,
    cmd_importance,
    cmd_prune,
    cmd_report,
    cmd_train_teacher,
)

settings = get_settings()
logger = get_logger("layerprune.main")

DISTILL_TERMS = ("logit", "latent", "attention", "embedding")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="layerprune", description="Layer pruning and distillation healing pipeline")
    parser.add_argument("--config", help="Experiment YAML file (defaults are used when omitted)")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.FIELD=VALUE",
        help="Override one config field; may be repeated",
    )
    parser.add_argument("--show-config", action="store_true", help="Print the resolved config as YAML and exit")
    parser.add_argument("--workers", type=int, default=None, help="Worker cap for read-only evaluation")

    sub = parser.add_subparsers(dest="command")

    sub.add_parser("gen-corpus", help="Write train and eval corpora")

    p = sub.add_parser("train-teacher", help="Train the full-depth teacher")
    p.add_argument("--out", help="Checkpoint path")

    p = sub.add_parser("importance", help="Score every layer (WLI and CLI)")
    p.add_argument("--checkpoint")
    p.add_argument("--out", help="Profile CSV path")

    p = sub.add_parser("prune", help="Drop the least important layers")
    p.add_argument("--keep", type=int, action="append", required=True, help="Layers to retain; may be repeated")
    p.add_argument("--criterion", choices=["wli", "cli"], default="wli")
    p.add_argument("--checkpoint")
    p.add_argument("--profile")

    p = sub.add_parser("heal", help="Distil the teacher into a pruned student")
    p.add_argument("--student")
    p.add_argument("--teacher")
    p.add_argument("--plan")
    p.add_argument("--out")
    p.add_argument("--log")
    p.add_argument("--steps", type=int)
    p.add_argument("--target-mode", choices=["dynamic", "same_index"])
    for term in DISTILL_TERMS:
        p.add_argument(f"--no-{term}", action="store_true", help=f"Disable the {term} alignment term")

    p = sub.add_parser("eval", help="TER, throughput and size of one checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--label")
    p.add_argument("--out")

    p = sub.add_parser("report", help="Comparison tables and plot data")
    p.add_argument("inputs", nargs="+", help="*.eval.json, profile *.csv and training log *.jsonl files")
    p.add_argument("--out-dir")

    return parser


def _heal_overrides(args: argparse.Namespace) -> list[str]:
    overrides = []
    if args.steps is not None:
        overrides.append(f"distill.steps={args.steps}")
    if args.target_mode is not None:
        overrides.append(f"distill.target_mode={args.target_mode}")
    for term in DISTILL_TERMS:
        if getattr(args, f"no_{term}"):
            overrides.append(f"distill.use_{term}=false")
    return overrides


def run(args: argparse.Namespace, config: ExperimentConfig, workers: int) -> int:
    if args.command == "gen-corpus":
        train_path, eval_path = cmd_gen_corpus(config)
        print(f"train corpus: {train_path}\neval corpus:  {eval_path}")
    elif args.command == "train-teacher":
        result = cmd_train_teacher(config, workers=workers, out=args.out)
        print(f"teacher TER {result.final_error_rate:.4f} after {result.tokens_seen:,} tokens")
    elif args.command == "importance":
        profile = cmd_importance(config, checkpoint=args.checkpoint, out=args.out, workers=workers)
        for score in profile.layers:
            print(f"layer {score.layer_index}: wli={score.wli:.4f} cli={score.cli:.4f}")
    elif args.command == "prune":
        for outcome in cmd_prune(config, args.keep, args.criterion, args.checkpoint, args.profile):
            print(f"{outcome.checkpoint}: retained {outcome.plan.retained}; {outcome.summary}")
    elif args.command == "heal":
        result = cmd_heal(
            config,
            student_path=args.student,
            teacher_path=args.teacher,
            plan_path=args.plan,
            out=args.out,
            log_path=args.log,
            workers=workers,
        )
        print(f"healed with {result.tokens_seen:,} tokens over {len(result.records)} logged steps")
    elif args.command == "eval":
        report, path = cmd_eval(config, args.checkpoint, label=args.label, out=args.out, workers=workers)
        print(f"{report.label}: TER {report.error_rate:.4f}, {report.tokens_per_second:.1f} tok/s -> {path}")
    elif args.command == "report":
        print(cmd_report(config, args.inputs, out_dir=args.out_dir), end="")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    setup_logger("layerprune", level=settings.log_level, log_file=settings.log_file, log_format=settings.log_format)
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = list(args.overrides)
    if args.command == "heal":
        overrides += _heal_overrides(args)

    try:
        config = load_config(args.config, overrides).resolved()
        if args.show_config:
            print(config.to_yaml(), end="")
            return 0
        if args.command is None:
            parser.print_help()
            return 1
        return run(args, config, args.workers or settings.workers)
    except LayerPruneError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
