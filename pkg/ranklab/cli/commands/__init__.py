# ranklab/cli/commands/__init__.py
from cli.commands import allocate, evaluate, report, selftest, train

COMMANDS = (train, allocate, evaluate, report, selftest)
