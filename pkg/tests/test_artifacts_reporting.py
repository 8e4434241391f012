import math

import numpy as np
import pandas as pd
import pytest

from core.errors import ArtifactError
from schemas.reports import (
    AllocationDelta,
    AllocationHistory,
    AllocationRound,
    ImportanceReport,
    RankScore,
)
from services.reporting import (
    allocation_table,
    angle_histogram,
    build_report,
    export_report,
    importance_distribution,
    module_importance,
    render,
)
from utils.artifacts import (
    ALLOCATION_COLUMNS,
    MetricsLog,
    load_history,
    read_allocation_csv,
    read_metrics,
    save_history,
)

NAMES = {0: "L0.q", 1: "L0.k", 2: "L0.v"}


def _history(n_rounds: int) -> AllocationHistory:
    """Three modules of rank 2; each round prunes from module 0 and grows module 2."""
    history = AllocationHistory(
        strategy="ablation", R_target=6, module_names=NAMES, initial_rank_map={0: 2, 1: 2, 2: 2},
    )
    rank_map = {0: 2, 1: 2, 2: 2}
    for rnd in range(1, n_rounds + 1):
        scores = []
        for m, r in sorted(rank_map.items()):
            for i in range(r):
                s_w, s_a = -1.0 - 0.1 * m, -2.0 + 0.1 * i
                scores.append(RankScore(module_id=m, rank_index=i, S_without=s_w, S_alone=s_a, IS=-s_w + s_a))
        report = ImportanceReport(
            round=rnd, per_rank=scores,
            per_module_mean={
                m: float(np.mean([s.IS for s in scores if s.module_id == m])) for m, r in rank_map.items() if r
            },
            val_batch_id=f"val:{rnd}", S_full=-1.0,
        )
        pruned = (0, rank_map[0] - 1) if rank_map[0] > 0 else None
        before = sum(rank_map.values())
        if pruned is not None:
            rank_map[0] -= 1
            rank_map[2] += 1
        history.rounds.append(AllocationRound(
            round=rnd,
            delta=AllocationDelta(
                round=rnd, pruned=[pruned] if pruned else [], grown_module=2 if pruned else None,
                added=1 if pruned else 0, active_before=before, active_after=sum(rank_map.values()),
            ),
            report=report, rank_map=dict(rank_map), val_ce=1.0 / rnd, step=10 * rnd,
        ))
    return history


class TestHistoryArtifacts:
    def test_json_round_trip(self, tmp_path):
        history = _history(2)
        save_history(history, tmp_path)
        assert load_history(tmp_path / "history.json") == history

    def test_csv_has_one_row_per_scored_rank(self, tmp_path):
        history = _history(4)
        paths = save_history(history, tmp_path)
        frame = read_allocation_csv(paths["csv"])
        assert list(frame.columns) == ALLOCATION_COLUMNS
        assert len(frame) == sum(len(r.report.per_rank) for r in history.rounds)
        first = frame[frame["round"] == 1]
        assert (first["action"] == "pruned").sum() == 1
        assert set(first.loc[first.module_id == 2, "action"]) == {"grown_module"}

    def test_rounds_without_report_list_pruned_ranks(self):
        history = AllocationHistory(strategy="l0_baseline", R_target=6, module_names=NAMES,
                                    initial_rank_map={0: 2, 1: 2, 2: 2})
        history.rounds.append(AllocationRound(
            round=1, delta=AllocationDelta(round=1, pruned=[(1, 0), (2, 1)], active_before=6, active_after=4),
            rank_map={0: 2, 1: 1, 2: 1}, step=400,
        ))
        rows = history.score_rows()
        assert [(r["module_id"], r["rank_index"], r["action"]) for r in rows] == [(1, 0, "pruned"), (2, 1, "pruned")]
        assert rows[0]["IS"] is None

    def test_missing_and_corrupt_files_name_the_path(self, tmp_path):
        with pytest.raises(ArtifactError) as err:
            load_history(tmp_path / "nope.json")
        assert err.value.path == tmp_path / "nope.json"
        bad = tmp_path / "history.json"
        bad.write_text("{not json", encoding="utf-8")
        with pytest.raises(ArtifactError, match="history.json"):
            load_history(bad)
        csv = tmp_path / "allocation.csv"
        csv.write_text("round,IS\n1,0.5\n", encoding="utf-8")
        with pytest.raises(ArtifactError, match="missing columns"):
            read_allocation_csv(csv)


class TestMetricsLog:
    def test_header_written_once_and_append_mode(self, tmp_path):
        path = tmp_path / "metrics.csv"
        log = MetricsLog(path)
        log.append(step=0, phase="warmup", round=None, train_ce=2.0, active_total=6, lr=0.1)
        log.flush()
        log.append(step=1, phase="warmup", round=None, train_ce=1.5, active_total=6, lr=0.1)
        log.flush()
        resumed = MetricsLog(path, append=True)
        resumed.append(step=2, phase="recover", round=1, train_ce=1.2, active_total=6, lr=0.05)
        resumed.flush()
        frame = read_metrics(path)
        assert list(frame["step"]) == [0, 1, 2]
        assert frame["ga_degrees"].isna().all()

    def test_flushed_rows_leave_memory(self, tmp_path):
        log = MetricsLog(tmp_path / "metrics.csv")
        for step in range(3):
            log.append(step=step, phase="warmup", round=None, train_ce=1.0, active_total=6, lr=0.1)
        assert log.pending == 3 and log.rows == []
        log.flush()
        assert log.pending == 0 and log.rows == []
        log.append(step=3, phase="warmup", round=None, train_ce=0.9, active_total=6, lr=0.1)
        assert list(log.frame()["step"]) == [0, 1, 2, 3]

    def test_fresh_log_replaces_old_file(self, tmp_path):
        path = tmp_path / "metrics.csv"
        path.write_text("stale\n", encoding="utf-8")
        MetricsLog(path)
        assert not path.exists()

    def test_in_memory_log(self):
        log = MetricsLog(None)
        log.append(step=0, phase="warmup", round=None, train_ce=1.0, active_total=3, lr=0.1)
        log.flush()
        assert len(log.frame()) == 1


class TestReportTables:
    def test_empty_history_shows_initial_allocation(self):
        table = allocation_table(_history(0))
        assert list(table.index) == ["init"]
        assert table.loc["init", "total"] == 6
        assert list(table.columns) == ["L0.q", "L0.k", "L0.v", "total"]

    def test_four_rounds_give_five_snapshots(self):
        table = allocation_table(_history(4))
        assert len(table) == 5
        assert table.loc["round 2", "L0.q"] == 0 and table.loc["round 2", "L0.v"] == 4
        assert (table["total"] <= 6).all()

    def test_importance_tables(self):
        history = _history(2)
        dist = importance_distribution(history)
        assert list(dist.index) == [1, 2]
        assert dist.loc[1, "count"] == 6
        mod = module_importance(history)
        assert set(mod.columns) == {"L0.q", "L0.k", "L0.v"}

    def test_angle_histogram(self):
        metrics = pd.DataFrame({"ga_degrees": [5.0, 95.0, 99.0, math.nan, 180.0]})
        table = angle_histogram(metrics, bin_degrees=10)
        assert len(table) == 18
        assert int(table["steps"].sum()) == 4
        assert table["steps"].iloc[0] == 1 and table["steps"].iloc[9] == 2 and table["steps"].iloc[-1] == 1
        assert table["fraction"].sum() == pytest.approx(1.0)

    def test_build_export_render(self, tmp_path):
        save_history(_history(3), tmp_path)
        log = MetricsLog(tmp_path / "metrics.csv")
        for step, degrees in enumerate([30.0, 100.0, 120.0]):
            log.append(step=step, phase="recover", round=1, train_ce=1.0, ga_degrees=degrees, active_total=6, lr=0.1)
        log.flush()
        tables = build_report(tmp_path / "history.json", tmp_path / "metrics.csv")
        assert set(tables) == {"allocation", "importance", "module_importance", "angles"}
        paths = export_report(tables, tmp_path / "tables")
        assert all(p.is_file() for p in paths.values())
        text = render(tables)
        assert "── allocation ──" in text and "round 3" in text
