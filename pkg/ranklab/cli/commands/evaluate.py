# ranklab/cli/commands/evaluate.py
import argparse
from pathlib import Path

from cli.deps import add_section_flags, flag_overrides
from services.runs import evaluate_checkpoint

NAME = "eval"


def register(subparsers) -> None:
    parser = subparsers.add_parser(NAME, help="evaluate a checkpoint on its task (or an overridden one)")
    parser.add_argument("checkpoint", type=Path)
    add_section_flags(parser, "task")
    parser.set_defaults(handler=handle)


def handle(args: argparse.Namespace) -> int:
    overrides = flag_overrides(args, sections=["task"]).get("task")
    metrics = evaluate_checkpoint(args.checkpoint, task_overrides=overrides)
    for key, value in metrics.items():
        print(f"{key:18s} {value:.4f}")
    return 0
