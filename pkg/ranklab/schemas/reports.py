# ranklab/schemas/reports.py
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, Field, model_validator


# ── Importance ────────────────────────────────────────────────────────────────

class RankScore(BaseModel):
    module_id: int
    rank_index: int
    S_without: float
    S_alone: float
    IS: float

    @model_validator(mode="after")
    def consistent(self) -> "RankScore":
        if self.IS != -self.S_without + self.S_alone:
            raise ValueError(f"IS {self.IS} != -S_without + S_alone for rank {self.module_id}/{self.rank_index}")
        return self


class ImportanceReport(BaseModel):
    round: int
    per_rank: List[RankScore]
    per_module_mean: Dict[int, float]
    val_batch_id: str
    S_full: float  # S(M), diagnostics only

    def scores_for(self, module_id: int) -> List[RankScore]:
        return [s for s in self.per_rank if s.module_id == module_id]


# ── Allocation ────────────────────────────────────────────────────────────────

class AllocationDelta(BaseModel):
    round: int
    pruned: List[Tuple[int, int]] = Field(default_factory=list)  # (module_id, rank_index)
    grown_module: Optional[int] = None
    added: int = 0
    active_before: int
    active_after: int


class AllocationRound(BaseModel):
    round: int
    delta: AllocationDelta
    report: Optional[ImportanceReport] = None
    rank_map: Dict[int, int]  # Active ranks per module after the round
    val_ce: Optional[float] = None
    step: Optional[int] = None
    alpha_prime: Optional[Dict[int, List[float]]] = None
    ranking_agreement: Optional[bool] = None


class AllocationHistory(BaseModel):
    strategy: str
    R_target: int
    module_names: Dict[int, str]
    initial_rank_map: Dict[int, int]
    rounds: List[AllocationRound] = Field(default_factory=list)

    def snapshots(self) -> List[Dict[int, int]]:
        """Initial allocation followed by the allocation after each round."""
        return [self.initial_rank_map] + [r.rank_map for r in self.rounds]

    def score_rows(self) -> List[dict]:
        rows = []
        for rnd in self.rounds:
            pruned = set(map(tuple, rnd.delta.pruned))
            if rnd.report is None:
                for module_id, rank_index in rnd.delta.pruned:
                    rows.append({
                        "round": rnd.round, "module_id": module_id, "rank_index": rank_index,
                        "S_without": None, "S_alone": None, "IS": None, "action": "pruned",
                    })
                continue
            for s in rnd.report.per_rank:
                action = "pruned" if (s.module_id, s.rank_index) in pruned else (
                    "grown_module" if s.module_id == rnd.delta.grown_module else "kept"
                )
                rows.append({
                    "round": rnd.round, "module_id": s.module_id, "rank_index": s.rank_index,
                    "S_without": s.S_without, "S_alone": s.S_alone, "IS": s.IS, "action": action,
                })
        return rows


# ── Run ───────────────────────────────────────────────────────────────────────

class RunReport(BaseModel):
    strategy: str
    seed: int
    precision: str
    steps: int
    val_ce: float
    test_ce: float
    test_exact_match: float
    final_rank_map: Dict[str, int]
    total_active: int
    R_target: int
    elapsed_seconds: float = 0.0
    checkpoint_path: Optional[str] = None
    history_path: Optional[str] = None
    metrics_path: Optional[str] = None
