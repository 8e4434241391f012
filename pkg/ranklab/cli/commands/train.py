# ranklab/cli/commands/train.py
import argparse

from cli.deps import add_run_config_flags, load_run_config
from services.runs import train_eval

NAME = "train"


def register(subparsers) -> None:
    parser = subparsers.add_parser(NAME, help="build, allocate, train and evaluate one run")
    add_run_config_flags(parser)
    parser.set_defaults(handler=handle)


def handle(args: argparse.Namespace) -> int:
    config = load_run_config(args)
    report = train_eval(config)
    print(f"\n✅ {report.strategy} run finished in {report.elapsed_seconds:.1f}s ({report.steps} steps)")
    print(f"   test CE          {report.test_ce:.4f}")
    print(f"   test exact match {report.test_exact_match:.3f}")
    print(f"   active ranks     {report.total_active} / {report.R_target}")
    for module, rank in report.final_rank_map.items():
        print(f"     {module:10s} {rank}")
    print(f"   artifacts in     {report.checkpoint_path.rsplit('/', 1)[0]}")
    return 0
