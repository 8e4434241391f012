# ranklab/services/strategies.py
"""
Allocation strategies:
- ablation       warm-up, then N_A rounds of score → prune / grow → recover
- dnas_baseline  alternating adapter / gate-logit steps, pruning by smallest α'
- l0_baseline    Hard-Concrete gates with an expected-L0 penalty, periodic
                 threshold pruning, no growth
"""
import logging
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from sklearn.model_selection import train_test_split

from core.errors import ConfigurationError
from ml.gated_lora import prune_rank
from ml.transformer import SuperNetwork
from schemas.config import RunConfig
from schemas.reports import AllocationDelta, AllocationHistory, AllocationRound
from services.allocator import (
    RankKey,
    active_ranks,
    apply_reallocation,
    best_module,
    importance_scores,
    lowest_ranks,
    reallocate_step,
)
from services.trainer import StepHook, Trainer, evaluate_ce
from tasks.synthetic import Batch, Dataset, Split

logger = logging.getLogger("strategies")

STRATEGIES = ("ablation", "dnas_baseline", "l0_baseline")


def new_history(model: SuperNetwork, config: RunConfig) -> AllocationHistory:
    return AllocationHistory(
        strategy=config.allocator.strategy,
        R_target=config.allocator.R_target,
        module_names=model.module_names(),
        initial_rank_map=model.active_rank_map(),
    )


def _round_rngs(config: RunConfig, first_round: int) -> Tuple[np.random.Generator, np.random.Generator]:
    """Validation-batch and growth generators; resumed runs continue from their round index."""
    return (
        np.random.default_rng([config.seed, 3, first_round]),
        np.random.default_rng([config.seed, 4, first_round]),
    )


def _plan(trainer: Trainer, split: Split, config: RunConfig, warmup: bool, rounds: int) -> None:
    a = config.allocator
    epochs = (a.K1 if warmup else 0) + rounds * a.K2
    trainer.plan(trainer.steps_per_epoch(split) * max(epochs, 1))


# ── Ablation (AB-DNAS) ────────────────────────────────────────────────────────

def run_alora(
    model: SuperNetwork,
    data: Dataset,
    config: RunConfig,
    trainer: Optional[Trainer] = None,
    history: Optional[AllocationHistory] = None,
    warmup: bool = True,
    rounds: Optional[int] = None,
) -> Tuple[SuperNetwork, AllocationHistory]:
    """
    Train with gate logits frozen at 0 for K1 epochs, then run N_A allocation
    rounds. `history` / `warmup=False` / `rounds` let a resumed run append
    further rounds to an existing history.
    """
    a = config.allocator
    rounds = a.N_A if rounds is None else rounds
    trainer = trainer or Trainer(model, config, data)
    history = history or new_history(model, config)
    model.set_gate_training(False)
    _plan(trainer, data.train, config, warmup, rounds)

    if warmup and a.K1:
        trainer.round = None
        trainer.train_epochs(data.train, a.K1, "warmup", val_split=data.val, patience=a.patience)

    first = len(history.rounds) + 1
    val_rng, grow_rng = _round_rngs(config, first)
    for rnd in range(first, first + rounds):
        b_val = data.val.sample(a.val_batch_size, val_rng)
        report = importance_scores(model, b_val, rnd, n_jobs=a.n_jobs)
        delta = reallocate_step(model, report, a.r1, grow_rng, budget=a.R_target, grow_init=a.grow_init)
        trainer.rebind()
        trainer.round = rnd
        if a.K2:
            trainer.train_epochs(data.train, a.K2, "recover")
        history.rounds.append(AllocationRound(
            round=rnd, delta=delta, report=report, rank_map=model.active_rank_map(),
            val_ce=evaluate_ce(model, data.val), step=trainer.step,
        ))
    return model, history


# ── DNAS baseline ─────────────────────────────────────────────────────────────

def dnas_split(data: Dataset, config: RunConfig) -> Tuple[Split, Split]:
    """Seeded D_1 / D_2 partition of the training split."""
    idx = np.arange(len(data.train))
    d1, d2 = train_test_split(idx, train_size=config.allocator.dnas_split, random_state=config.seed, shuffle=True)
    if len(d1) == 0 or len(d2) == 0:
        raise ConfigurationError("allocator.dnas_split", f"leaves an empty partition of {len(idx)} sequences")
    return data.train.subset(np.sort(d1), "train.d1"), data.train.subset(np.sort(d2), "train.d2")


def _arch_batches(split: Split, config: RunConfig) -> Iterator[Batch]:
    rng = np.random.default_rng([config.seed, 5])
    while True:
        yield from split.batches(config.optimizer.batch_size, rng)


def alpha_prime_ranking(model: SuperNetwork) -> List[Tuple[float, int, int]]:
    """(α', module_id, rank_index) for every Active rank, ascending."""
    entries = []
    for m in model.module_ids:
        values = model.adapters[m].gate_values()
        entries += [(float(values[i]), m, int(i)) for i in model.adapters[m].active_indices()]
    return sorted(entries)


def dnas_baseline_allocate(
    model: SuperNetwork,
    data: Dataset,
    config: RunConfig,
    trainer: Optional[Trainer] = None,
    freeze_gates: bool = False,
) -> Tuple[SuperNetwork, AllocationHistory]:
    """
    Bi-level search: adapter steps on D_1, gate-logit steps on D_2. With
    `freeze_gates` there is no architecture step, so the whole training split
    trains the adapters and the run matches run_alora up to the pruning rule.
    """
    a = config.allocator
    trainer = trainer or Trainer(model, config, data)
    history = new_history(model, config)
    model.set_gate_training(not freeze_gates)

    hook: Optional[StepHook] = None
    if freeze_gates:
        d1 = data.train
    else:
        d1, d2 = dnas_split(data, config)
        arch_batches = _arch_batches(d2, config)

        def arch_hook(_step: int) -> None:
            trainer.arch_step(next(arch_batches))

        hook = arch_hook

    _plan(trainer, d1, config, True, a.N_A)
    if a.K1:
        trainer.round = None
        trainer.train_epochs(d1, a.K1, "warmup", val_split=data.val, patience=a.patience, after_step=hook)

    val_rng, grow_rng = _round_rngs(config, 1)
    for rnd in range(1, a.N_A + 1):
        ranking = alpha_prime_ranking(model)
        to_prune: List[RankKey] = [(m, i) for _, m, i in ranking[:a.r1]]
        by_module: Dict[int, List[float]] = {}
        for value, m, _ in ranking:
            by_module.setdefault(m, []).append(value)
        alpha_snapshot = {m: model.adapters[m].gate_values().tolist() for m in model.module_ids}

        report, agreement = None, None
        b_val = data.val.sample(a.val_batch_size, val_rng)
        if a.record_importance:
            report = importance_scores(model, b_val, rnd, n_jobs=a.n_jobs)
            agreement = set(lowest_ranks(report, a.r1)) == set(to_prune)
            logger.info(f"[round {rnd}] α'-ranking and IS-ranking agree on the pruned set: {agreement}")

        target = best_module({m: float(np.mean(v)) for m, v in by_module.items()})
        delta = apply_reallocation(model, to_prune, target, a.r1, rnd, grow_rng, a.R_target, a.grow_init)
        trainer.rebind()
        trainer.round = rnd
        if a.K2:
            trainer.train_epochs(d1, a.K2, "recover", after_step=hook)
        history.rounds.append(AllocationRound(
            round=rnd, delta=delta, report=report, rank_map=model.active_rank_map(),
            val_ce=evaluate_ce(model, data.val), step=trainer.step,
            alpha_prime=alpha_snapshot, ranking_agreement=agreement,
        ))
    model.set_gate_training(False)
    return model, history


# ── L0 baseline ───────────────────────────────────────────────────────────────

def prune_below_threshold(model: SuperNetwork, threshold: float) -> List[RankKey]:
    pruned = []
    for m, i in active_ranks(model):
        hc = model.adapters[m].hard_concrete
        if hc is not None and hc.log_theta.data[i] < threshold:
            prune_rank(model.adapters[m], i)
            pruned.append((m, i))
    return pruned


def l0_baseline_allocate(
    model: SuperNetwork,
    data: Dataset,
    config: RunConfig,
    trainer: Optional[Trainer] = None,
) -> Tuple[SuperNetwork, AllocationHistory]:
    a, regs = config.allocator, config.regularizers
    for adapter in model.adapters.values():
        if adapter.hard_concrete is None:
            adapter.install_hard_concrete(
                log_theta_init=regs.log_theta_init, tau=regs.tau,
                gamma_lower=regs.gamma_lower, zeta_upper=regs.zeta_upper,
            )
    trainer = trainer or Trainer(model, config, data)
    trainer.rebind()
    history = new_history(model, config)
    model.set_gate_training(False)
    epochs = a.K1 + a.N_A * a.K2
    trainer.plan(trainer.steps_per_epoch(data.train) * max(epochs, 1))

    def prune_hook(step: int) -> None:
        if step % a.prune_every:
            return
        before = model.total_active()
        pruned = prune_below_threshold(model, a.prune_threshold)
        if not pruned:
            return
        rnd = len(history.rounds) + 1
        delta = AllocationDelta(
            round=rnd, pruned=pruned, active_before=before, active_after=model.total_active(),
        )
        history.rounds.append(AllocationRound(
            round=rnd, delta=delta, rank_map=model.active_rank_map(), step=step,
        ))
        logger.info(f"[l0] step {step}: pruned {len(pruned)} ranks below log θ {a.prune_threshold}")

    trainer.round = None
    trainer.train_epochs(data.train, epochs, "l0", val_split=data.val, after_step=prune_hook)
    return model, history


def run_strategy(
    model: SuperNetwork,
    data: Dataset,
    config: RunConfig,
    trainer: Optional[Trainer] = None,
) -> Tuple[SuperNetwork, AllocationHistory]:
    strategy = config.allocator.strategy
    if strategy == "ablation":
        return run_alora(model, data, config, trainer)
    if strategy == "dnas_baseline":
        return dnas_baseline_allocate(model, data, config, trainer)
    if strategy == "l0_baseline":
        return l0_baseline_allocate(model, data, config, trainer)
    raise ConfigurationError("allocator.strategy", f"unknown strategy {strategy!r}")
