# ranklab/services/allocator.py
"""
Ablation-based rank importance and the prune / grow reallocation step.

For every Active rank r of the super-network M:
    S_without = S(M \\ r)   only r's gate forced to 0
    S_alone   = S(M_r)     every gate except r's forced to 0
    IS(r)     = −S_without + S_alone
where S is the negative validation cross-entropy. Gate overrides travel with
each forward call, so the 2·N evaluations share the model read-only and run
on a joblib thread pool.
"""
import logging
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed

from core.errors import ContractError, NumericError
from ml.gated_lora import GateOverride, grow_ranks, prune_rank
from ml.tensor import no_grad
from ml.transformer import SuperNetwork, lm_loss
from schemas.reports import AllocationDelta, ImportanceReport, RankScore

logger = logging.getLogger("allocator")

RankKey = Tuple[int, int]


def metric_S(
    model: SuperNetwork,
    batch,
    gates: Optional[GateOverride] = None,
    loss_scale: float = 1.0,
) -> float:
    """−(loss_scale · CE) of `model` seen through `gates`; higher is better."""
    with no_grad():
        return -(loss_scale * lm_loss(model, batch, gates=gates).item())


def active_ranks(model: SuperNetwork) -> List[RankKey]:
    return [(m, int(i)) for m in model.module_ids for i in model.adapters[m].active_indices()]


def _ablate(model: SuperNetwork, batch, key: RankKey, loss_scale: float) -> Tuple[float, float]:
    m, i = key
    rank = model.adapters[m].rank
    try:
        s_without = metric_S(model, batch, GateOverride.without_rank(m, i, rank), loss_scale)
        s_alone = metric_S(model, batch, GateOverride.only_rank(m, i, rank), loss_scale)
    except NumericError as e:
        raise NumericError(f"importance of rank {i} in module {m}: {e}") from e
    return s_without, s_alone


def importance_scores(
    model: SuperNetwork,
    batch,
    round_index: int = 0,
    n_jobs: int = 1,
    loss_scale: float = 1.0,
) -> ImportanceReport:
    keys = active_ranks(model)
    if not keys:
        raise ContractError("importance_scores needs at least one Active rank")

    s_full = metric_S(model, batch, loss_scale=loss_scale)
    results = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_ablate)(model, batch, key, loss_scale) for key in keys
    )

    per_rank = [
        RankScore(module_id=m, rank_index=i, S_without=s_w, S_alone=s_a, IS=-s_w + s_a)
        for (m, i), (s_w, s_a) in zip(keys, results)
    ]
    by_module: Dict[int, List[float]] = {}
    for s in per_rank:
        by_module.setdefault(s.module_id, []).append(s.IS)
    means = {m: float(np.mean(v)) for m, v in by_module.items()}

    logger.info(f"[round {round_index}] scored {len(per_rank)} ranks, S(M)={s_full:.4f}")
    return ImportanceReport(
        round=round_index,
        per_rank=per_rank,
        per_module_mean=means,
        val_batch_id=getattr(batch, "batch_id", ""),
        S_full=s_full,
    )


# ── Reallocation ──────────────────────────────────────────────────────────────

def lowest_ranks(report: ImportanceReport, r1: int) -> List[RankKey]:
    """The r1 lowest-IS ranks; ties go to the lower (module_id, rank_index)."""
    ordered = sorted(report.per_rank, key=lambda s: (s.IS, s.module_id, s.rank_index))
    return [(s.module_id, s.rank_index) for s in ordered[:r1]]


def highest_ranks(report: ImportanceReport, r1: int) -> List[RankKey]:
    ordered = sorted(report.per_rank, key=lambda s: (-s.IS, s.module_id, s.rank_index))
    return [(s.module_id, s.rank_index) for s in ordered[:r1]]


def best_module(means: Dict[int, float]) -> Optional[int]:
    if not means:
        return None
    return min(means, key=lambda m: (-means[m], m))


def apply_reallocation(
    model: SuperNetwork,
    to_prune: List[RankKey],
    target: Optional[int],
    r1: int,
    round_index: int,
    rng: np.random.Generator,
    budget: Optional[int] = None,
    grow_init: Literal["random", "mean"] = "random",
) -> AllocationDelta:
    """Prune `to_prune`, then grow `target` by r1 if it lost nothing and the budget allows."""
    before = model.total_active()
    for m, i in to_prune:
        prune_rank(model.adapters[m], i)
    after_prune = model.total_active()

    touched = {m for m, _ in to_prune}
    grown, added = None, 0
    if target is not None and target not in touched:
        if budget is None or after_prune + r1 <= budget:
            grow_ranks(model.adapters[target], r1, rng, init=grow_init)
            grown, added = target, r1

    delta = AllocationDelta(
        round=round_index,
        pruned=list(to_prune),
        grown_module=grown,
        added=added,
        active_before=before,
        active_after=model.total_active(),
    )
    grown_msg = f"grew {model.adapters[grown].name} by {added}" if grown is not None else "no growth"
    logger.info(
        f"[round {round_index}] pruned {len(to_prune)} ranks in "
        f"{sorted(model.adapters[m].name for m in touched)}, {grown_msg}; "
        f"active {before} -> {delta.active_after}"
    )
    return delta


def reallocate_step(
    model: SuperNetwork,
    report: ImportanceReport,
    r1: int,
    rng: np.random.Generator,
    budget: Optional[int] = None,
    grow_init: Literal["random", "mean"] = "random",
) -> AllocationDelta:
    if len(report.per_rank) < r1:
        raise ContractError(f"reallocate_step: {len(report.per_rank)} Active ranks, cannot prune {r1}")
    return apply_reallocation(
        model, lowest_ranks(report, r1), best_module(report.per_module_mean),
        r1, report.round, rng, budget, grow_init,
    )


# ── Diagnostics ───────────────────────────────────────────────────────────────

def pruning_damage(
    model: SuperNetwork,
    report: ImportanceReport,
    batch,
    r1: int,
    which: Literal["bottom", "top"] = "bottom",
) -> float:
    """Held-out CE with the bottom (or top) r1 ranks by IS masked off."""
    chosen = lowest_ranks(report, r1) if which == "bottom" else highest_ranks(report, r1)
    masks: Dict[int, np.ndarray] = {}
    for m, i in chosen:
        mask = masks.setdefault(m, np.ones(model.adapters[m].rank))
        mask[i] = 0.0
    return -metric_S(model, batch, GateOverride(masks))
