# ranklab/core/errors.py
"""
Exception hierarchy shared by the engine, the allocator and the CLI.
The CLI turns any RankLabError into a one-line message and exit status 2.
"""
from pathlib import Path
from typing import Optional, Sequence, Union


class RankLabError(Exception):
    """Base class for every error raised on purpose by ranklab."""


class DimensionError(RankLabError, ValueError):
    def __init__(self, op: str, *shapes: Sequence[int]):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class NumericError(RankLabError, ArithmeticError):
    """A primitive produced NaN or Inf."""


class ContractError(RankLabError, RuntimeError):
    """A documented precondition was violated by the caller."""


class ConfigurationError(RankLabError, ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class DegenerateGradientError(RankLabError):
    """Gradient norm at or below epsilon; grad-align falls back to mode off."""


class TrainingAborted(NumericError):
    def __init__(self, message: str, phase: str, round: Optional[int], step: int):
        self.phase = phase
        self.round = round
        self.step = step
        where = f"phase={phase} step={step}" + (f" round={round}" if round is not None else "")
        super().__init__(f"training aborted ({where}): {message}")


class ArtifactError(RankLabError, OSError):
    def __init__(self, path: Union[str, Path], message: str):
        self.path = Path(path)
        super().__init__(f"{self.path}: {message}")
