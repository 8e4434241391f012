# ranklab/utils/artifacts.py
"""
Run artifacts on disk:
- config.json        RunConfig
- history.json       AllocationHistory
- allocation.csv     one row per scored (or pruned) rank per round
- metrics.csv        append-only, one row per optimizer step
- report.json        RunReport
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Type, TypeVar, Union

import pandas as pd
from pydantic import BaseModel, ValidationError

from core.config import settings
from core.errors import ArtifactError
from schemas.config import RunConfig
from schemas.reports import AllocationHistory, RunReport

logger = logging.getLogger("artifacts")

PathLike = Union[str, Path]
M = TypeVar("M", bound=BaseModel)

ALLOCATION_COLUMNS = ["round", "module_id", "rank_index", "S_without", "S_alone", "IS", "action"]
METRIC_COLUMNS = [
    "step", "phase", "round", "train_ce", "orthogonal", "l0",
    "ga_degrees", "ga_coefficient", "active_total", "lr",
]


def run_dir(config: RunConfig) -> Path:
    out = Path(config.output_dir) if config.output_dir else settings.output_path
    out.mkdir(parents=True, exist_ok=True)
    return out


# ── JSON documents ────────────────────────────────────────────────────────────

def save_model(path: PathLike, doc: BaseModel) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        path.write_text(doc.model_dump_json(indent=2), encoding="utf-8")
    except OSError as e:
        raise ArtifactError(path, f"cannot write ({e})") from e
    return path


def load_model(path: PathLike, cls: Type[M]) -> M:
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(path, "file not found")
    try:
        return cls.model_validate_json(path.read_text(encoding="utf-8"))
    except (ValidationError, ValueError, UnicodeDecodeError) as e:
        raise ArtifactError(path, f"corrupt {cls.__name__} ({e.__class__.__name__})") from e


def load_config(path: PathLike) -> RunConfig:
    return load_model(path, RunConfig)


def load_history(path: PathLike) -> AllocationHistory:
    return load_model(path, AllocationHistory)


def load_report(path: PathLike) -> RunReport:
    return load_model(path, RunReport)


# ── Allocation history ────────────────────────────────────────────────────────

def history_frame(history: AllocationHistory) -> pd.DataFrame:
    return pd.DataFrame(history.score_rows(), columns=ALLOCATION_COLUMNS)


def save_history(history: AllocationHistory, directory: PathLike) -> Dict[str, Path]:
    directory = Path(directory)
    json_path = save_model(directory / "history.json", history)
    csv_path = directory / "allocation.csv"
    try:
        history_frame(history).to_csv(csv_path, index=False)
    except OSError as e:
        raise ArtifactError(csv_path, f"cannot write ({e})") from e
    logger.info(f"[artifacts] history with {len(history.rounds)} rounds -> {json_path}")
    return {"json": json_path, "csv": csv_path}


def read_allocation_csv(path: PathLike) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(path, "file not found")
    try:
        frame = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise ArtifactError(path, f"corrupt allocation CSV ({e})") from e
    missing = set(ALLOCATION_COLUMNS) - set(frame.columns)
    if missing:
        raise ArtifactError(path, f"missing columns {sorted(missing)}")
    return frame


# ── Metrics log ───────────────────────────────────────────────────────────────

class MetricsLog:
    """
    Buffered append-only CSV; rows reach disk on flush() and are then dropped
    from memory. Without a path every row stays in `rows`.
    """

    def __init__(self, path: Optional[PathLike], append: bool = False):
        self.path = Path(path) if path is not None else None
        self.rows: List[dict] = []
        self._pending: List[dict] = []
        self._header_written = bool(append and self.path is not None and self.path.is_file())
        if self.path is not None and not append and self.path.exists():
            self.path.unlink()

    def append(self, **row) -> None:
        if self.path is None:
            self.rows.append(row)
        else:
            self._pending.append(row)

    def flush(self) -> None:
        if self.path is None or not self._pending:
            return
        frame = pd.DataFrame(self._pending, columns=METRIC_COLUMNS)
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            frame.to_csv(self.path, mode="a", header=not self._header_written, index=False)
        except OSError as e:
            raise ArtifactError(self.path, f"cannot append metrics ({e})") from e
        self._header_written = True
        self._pending.clear()

    @property
    def pending(self) -> int:
        return len(self._pending)

    def frame(self) -> pd.DataFrame:
        if self.path is None:
            return pd.DataFrame(self.rows, columns=METRIC_COLUMNS)
        parts = [read_metrics(self.path)] if self._header_written else []
        if self._pending:
            parts.append(pd.DataFrame(self._pending, columns=METRIC_COLUMNS))
        if not parts:
            return pd.DataFrame(columns=METRIC_COLUMNS)
        return pd.concat(parts, ignore_index=True)


def read_metrics(path: PathLike) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(path, "file not found")
    try:
        return pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ArtifactError(path, f"corrupt metrics log ({e})") from e
