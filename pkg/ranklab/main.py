# ranklab/main.py
"""
ranklab – command-line entry point.

    python ranklab/main.py train --allocator.N_A 4 --ga.mode soft
    python ranklab/main.py allocate runs --rounds 2
    python ranklab/main.py eval runs/checkpoint.rlck
    python ranklab/main.py report runs/history.json --metrics runs/metrics.csv
    python ranklab/main.py selftest
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

sys.path.insert(0, str(Path(__file__).resolve().parent))

from pydantic import ValidationError  # noqa: E402

from cli.commands import COMMANDS  # noqa: E402
from core.config import settings  # noqa: E402
from core.errors import RankLabError  # noqa: E402

EXIT_USAGE = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=settings.APP_NAME,
        description="Rank allocation for gated low-rank adapters on a toy transformer",
    )
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        command.register(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=args.log_level,
        format="%(asctime)s %(levelname)-7s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        print(f"❌ invalid configuration: {where}: {first['msg']}", file=sys.stderr)
        return EXIT_USAGE
    except RankLabError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
