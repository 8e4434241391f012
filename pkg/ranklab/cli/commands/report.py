# ranklab/cli/commands/report.py
import argparse
from pathlib import Path

from services.reporting import build_report, export_report, render

NAME = "report"


def register(subparsers) -> None:
    parser = subparsers.add_parser(NAME, help="allocation / importance / angle tables from run artifacts")
    parser.add_argument("history", type=Path, help="history.json")
    parser.add_argument("--metrics", type=Path, default=None, help="metrics.csv (adds the angle histogram)")
    parser.add_argument("--export", type=Path, default=None, help="directory to write one CSV per table")
    parser.set_defaults(handler=handle)


def handle(args: argparse.Namespace) -> int:
    tables = build_report(args.history, args.metrics)
    print(render(tables))
    if args.export is not None:
        paths = export_report(tables, args.export)
        print(f"\n✅ wrote {len(paths)} tables to {args.export}")
    return 0
