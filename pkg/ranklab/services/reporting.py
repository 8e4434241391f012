# ranklab/services/reporting.py
"""
Summary tables built from run artifacts: rank allocation per module per
round, importance-score distributions and gradient-angle histograms.
"""
import logging
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
import pandas as pd

from schemas.reports import AllocationHistory
from utils.artifacts import history_frame, load_history, read_metrics

logger = logging.getLogger("reporting")

ANGLE_BIN_DEGREES = 10


def allocation_table(history: AllocationHistory) -> pd.DataFrame:
    """One row per snapshot (initial + one per round), one column per module."""
    names = history.module_names
    rows = []
    labels = ["init"] + [f"round {r.round}" for r in history.rounds]
    for snapshot in history.snapshots():
        rows.append({names.get(m, str(m)): snapshot.get(m, 0) for m in sorted(names)})
    table = pd.DataFrame(rows, index=pd.Index(labels, name="snapshot"))
    table["total"] = table.sum(axis=1)
    return table


def importance_distribution(history: AllocationHistory) -> pd.DataFrame:
    frame = history_frame(history).dropna(subset=["IS"])
    if frame.empty:
        return pd.DataFrame(columns=["count", "mean", "std", "min", "25%", "50%", "75%", "max"])
    return frame.groupby("round")["IS"].describe()


def module_importance(history: AllocationHistory) -> pd.DataFrame:
    """Per-module mean IS by round (rows: round, columns: module)."""
    records = [
        {"round": r.round, "module": history.module_names.get(m, str(m)), "mean_IS": v}
        for r in history.rounds if r.report is not None
        for m, v in r.report.per_module_mean.items()
    ]
    if not records:
        return pd.DataFrame()
    return pd.DataFrame(records).pivot(index="round", columns="module", values="mean_IS")


def angle_histogram(metrics: pd.DataFrame, bin_degrees: int = ANGLE_BIN_DEGREES) -> pd.DataFrame:
    degrees = metrics["ga_degrees"].dropna() if "ga_degrees" in metrics else pd.Series(dtype=float)
    edges = np.arange(0, 180 + bin_degrees, bin_degrees)
    counts = pd.cut(degrees, bins=edges, include_lowest=True).value_counts(sort=False)
    table = counts.rename("steps").to_frame()
    table.index = table.index.astype(str)
    table.index.name = "degrees"
    table["fraction"] = table["steps"] / max(int(table["steps"].sum()), 1)
    return table


def build_report(
    history_path: Union[str, Path],
    metrics_path: Optional[Union[str, Path]] = None,
) -> Dict[str, pd.DataFrame]:
    history = load_history(history_path)
    tables = {
        "allocation": allocation_table(history),
        "importance": importance_distribution(history),
        "module_importance": module_importance(history),
    }
    if metrics_path is not None:
        tables["angles"] = angle_histogram(read_metrics(metrics_path))
    logger.info(f"[report] {len(history.rounds)} rounds from {history_path}")
    return tables


def export_report(tables: Dict[str, pd.DataFrame], directory: Union[str, Path]) -> Dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, table in tables.items():
        paths[name] = directory / f"{name}.csv"
        table.to_csv(paths[name])
    return paths


def render(tables: Dict[str, pd.DataFrame]) -> str:
    parts = []
    for name, table in tables.items():
        body = table.to_string(float_format=lambda v: f"{v:.4f}") if not table.empty else "(empty)"
        parts.append(f"── {name} ──\n{body}")
    return "\n\n".join(parts)
