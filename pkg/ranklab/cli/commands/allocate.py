# ranklab/cli/commands/allocate.py
import argparse
from pathlib import Path

from services.runs import resume_allocation

NAME = "allocate"


def register(subparsers) -> None:
    parser = subparsers.add_parser(NAME, help="resume a finished ablation run with extra allocation rounds")
    parser.add_argument("run_dir", type=Path, help="directory written by `train`")
    parser.add_argument("--rounds", type=int, default=1, help="allocation rounds to append (default 1)")
    parser.set_defaults(handler=handle)


def handle(args: argparse.Namespace) -> int:
    report = resume_allocation(args.run_dir, args.rounds)
    print(f"\n✅ +{args.rounds} rounds: test CE {report.test_ce:.4f}, exact match {report.test_exact_match:.3f}")
    print(f"   active ranks {report.total_active} / {report.R_target}")
    return 0
