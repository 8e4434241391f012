# ranklab/services/runs.py
"""
Whole runs: build, allocate, compact, evaluate and write every artifact.

A run directory holds config.json, checkpoint.rlck, history.json,
allocation.csv, metrics.csv and report.json.
"""
import logging
import time
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from core.errors import ConfigurationError, RankLabError
from ml.tensor import set_precision
from ml.transformer import SuperNetwork, build_supernetwork
from schemas.config import RunConfig, TaskSpec
from schemas.reports import AllocationHistory, RunReport
from services.strategies import run_alora, run_strategy
from services.trainer import Trainer, evaluate_ce, exact_match
from tasks.synthetic import Dataset, gen_task
from utils.artifacts import MetricsLog, load_history, run_dir, save_history, save_model
from utils.checkpoint import load_checkpoint, save_checkpoint

logger = logging.getLogger("runs")

CHECKPOINT_NAME = "checkpoint.rlck"


def evaluate(model: SuperNetwork, data: Dataset) -> Dict[str, float]:
    return {
        "val_ce": evaluate_ce(model, data.val),
        "test_ce": evaluate_ce(model, data.test),
        "test_exact_match": exact_match(model, data, data.test),
    }


def _report(
    model: SuperNetwork,
    data: Dataset,
    config: RunConfig,
    steps: int,
    elapsed: float,
    out: Path,
) -> RunReport:
    metrics = evaluate(model, data)
    names = model.module_names()
    return RunReport(
        strategy=config.allocator.strategy,
        seed=config.seed,
        precision=config.precision,
        steps=steps,
        final_rank_map={names[m]: r for m, r in model.active_rank_map().items()},
        total_active=model.total_active(),
        R_target=config.allocator.R_target,
        elapsed_seconds=elapsed,
        checkpoint_path=str(out / CHECKPOINT_NAME),
        history_path=str(out / "history.json"),
        metrics_path=str(out / "metrics.csv"),
        **metrics,
    )


def _finish(
    model: SuperNetwork,
    trainer: Trainer,
    history: AllocationHistory,
    data: Dataset,
    config: RunConfig,
    out: Path,
    started: float,
) -> RunReport:
    trainer.compact()
    save_checkpoint(out / CHECKPOINT_NAME, model, config)
    save_history(history, out)
    report = _report(model, data, config, trainer.step, time.perf_counter() - started, out)
    save_model(out / "report.json", report)
    logger.info(
        f"[run] {config.allocator.strategy} seed={config.seed}: test_ce={report.test_ce:.4f} "
        f"exact_match={report.test_exact_match:.3f} active={report.total_active}/{report.R_target}"
    )
    return report


def train_eval(config: RunConfig) -> RunReport:
    started = time.perf_counter()
    set_precision(config.precision)
    out = run_dir(config)
    save_model(out / "config.json", config)

    data = gen_task(config.task)
    rng = np.random.default_rng([config.seed, 0])
    model = build_supernetwork(
        config.model, config.allocator.initial_ranks, rng,
        config.optimizer.adapter_init, config.optimizer.adapter_init_std,
    )
    trainer = Trainer(model, config, data, MetricsLog(out / "metrics.csv"))
    try:
        model, history = run_strategy(model, data, config, trainer)
    except RankLabError as e:
        logger.error(f"[run] {config.allocator.strategy} seed={config.seed} in {out} failed: {e}")
        raise
    return _finish(model, trainer, history, data, config, out, started)


def resume_allocation(directory: Union[str, Path], extra_rounds: int) -> RunReport:
    """Load a finished ablation run and append `extra_rounds` allocation rounds."""
    started = time.perf_counter()
    out = Path(directory)
    model, config = load_checkpoint(out / CHECKPOINT_NAME)
    if config is None:
        raise ConfigurationError("checkpoint", "has no run configuration to resume from")
    if config.allocator.strategy != "ablation":
        raise ConfigurationError("allocator.strategy", "only ablation runs can be resumed")
    set_precision(config.precision)
    history = load_history(out / "history.json")
    data = gen_task(config.task)
    trainer = Trainer(model, config, data, MetricsLog(out / "metrics.csv", append=True))
    if history.rounds and history.rounds[-1].step is not None:
        trainer.step = history.rounds[-1].step
    model, history = run_alora(model, data, config, trainer, history, warmup=False, rounds=extra_rounds)
    return _finish(model, trainer, history, data, config, out, started)


def evaluate_checkpoint(
    path: Union[str, Path],
    task: Optional[TaskSpec] = None,
    task_overrides: Optional[Dict] = None,
) -> Dict[str, float]:
    """Metrics of a saved model on its own task, or on `task` with `task_overrides` applied."""
    model, config = load_checkpoint(path)
    if config is not None:
        set_precision(config.precision)
    base = task or (config.task if config is not None else None)
    if base is None:
        raise ConfigurationError("task", "checkpoint carries no run configuration; pass a task")
    if task_overrides:
        base = TaskSpec.model_validate({**base.model_dump(), **task_overrides})
    return evaluate(model, gen_task(base))
