# ranklab/cli/commands/selftest.py
import argparse

from services.oracles import SUITES, run_selftest

NAME = "selftest"


def register(subparsers) -> None:
    parser = subparsers.add_parser(NAME, help="run the numerical oracle suites")
    parser.add_argument("--suite", action="append", choices=sorted(SUITES), help="repeatable; default all")
    parser.add_argument("--seed", type=int, default=0)
    parser.set_defaults(handler=handle)


def handle(args: argparse.Namespace) -> int:
    print("\n" + "=" * 60)
    print("  ranklab self-test")
    print("=" * 60 + "\n")
    results = run_selftest(args.suite, seed=args.seed)
    for n, r in enumerate(results, 1):
        mark = "✅" if r.passed else "❌"
        print(f"[{n}] {r.name:14s} worst {r.worst:.2e} (tol {r.tolerance:.0e}, {r.seconds:.1f}s)  {mark}  {r.detail}")
    failed = [r.name for r in results if not r.passed]
    print()
    if failed:
        print(f"❌ {len(failed)} suite(s) failed: {', '.join(failed)}")
        return 1
    print(f"✅ all {len(results)} suites passed")
    return 0
