# ranklab/services/trainer.py
"""
Adapter training loop.

One optimizer step:
    g_main = ∇ CE
    g_aux  = ∇ (w_orth · orthogonal_reg + w_l0 · Σ expected_l0)
    g      = combine(g_main, g_aux)   if GA is on
             g_main + g_aux           if GA is off
then the optimizer update. The raw pre-optimizer angle between g_main and
g_aux is logged every step whenever an auxiliary term is active.
"""
import logging
from typing import Callable, Dict, List, Optional

import numpy as np

from core.errors import NumericError, TrainingAborted
from ml import ops
from ml.gated_lora import compact
from ml.grad_align import align, align_per_tensor
from ml.optim import Optimizer, build_optimizer
from ml.regularizers import expected_l0, orthogonal_reg
from ml.tensor import GradientMap, Tensor, backward, no_grad, param_key
from ml.transformer import SuperNetwork, greedy_decode, lm_loss
from schemas.config import RunConfig
from tasks.background import BatchPrefetcher
from tasks.synthetic import Batch, Dataset, Split
from utils.artifacts import MetricsLog

logger = logging.getLogger("trainer")

EVAL_BATCH = 256

StepHook = Callable[[int], None]


# ── Evaluation ────────────────────────────────────────────────────────────────

def evaluate_ce(model: SuperNetwork, split: Split, batch_size: int = EVAL_BATCH) -> float:
    """Token-weighted mean cross-entropy over the target positions of a split."""
    total, weight = 0.0, 0.0
    with no_grad():
        for batch in split.batches(batch_size):
            w = float(batch.loss_mask[:, 1:].sum())
            if w == 0:
                continue
            total += lm_loss(model, batch).item() * w
            weight += w
    return total / weight if weight else float("nan")


def exact_match(model: SuperNetwork, data: Dataset, split: Split, batch_size: int = EVAL_BATCH) -> float:
    """Fraction of sequences whose greedily decoded target is entirely correct."""
    prompts, targets = data.prompts(split), data.targets(split)
    hits = 0
    for start in range(0, len(split), batch_size):
        decoded = greedy_decode(model, prompts[start:start + batch_size], data.target_len)
        hits += int(np.all(decoded == targets[start:start + batch_size], axis=1).sum())
    return hits / len(split) if len(split) else 0.0


# ── Trainer ───────────────────────────────────────────────────────────────────

class Trainer:
    def __init__(
        self,
        model: SuperNetwork,
        config: RunConfig,
        data: Dataset,
        metrics: Optional[MetricsLog] = None,
        round_index: Optional[int] = None,
    ):
        self.model = model
        self.config = config
        self.data = data
        self.metrics = metrics or MetricsLog(None)
        self.round = round_index
        self.step = 0
        self.data_rng = np.random.default_rng([config.seed, 1])
        self.noise_rng = np.random.default_rng([config.seed, 2])
        self.optimizer: Optimizer = build_optimizer(model.adapter_parameters(), config.optimizer)
        self.arch_optimizer: Optional[Optimizer] = None

    # ── Structure ─────────────────────────────────────────────────────────────

    def plan(self, total_steps: int) -> None:
        self.optimizer.total_steps = total_steps

    def steps_per_epoch(self, split: Split) -> int:
        return -(-len(split) // self.config.optimizer.batch_size)

    def rebind(self) -> None:
        """Call after grow_ranks / prune so the optimizers see the new tensors."""
        self.optimizer.rebind(self.model.adapter_parameters())
        if self.arch_optimizer is not None:
            self.arch_optimizer.rebind(self.model.gate_parameters())

    def compact(self) -> None:
        """Physically drop Pruned ranks from every adapter and from optimizer state."""
        for m in self.model.module_ids:
            adapter = self.model.adapters[m]
            keys = {
                param_key(adapter.W_A): 1,
                param_key(adapter.W_B): 0,
            }
            if adapter.hard_concrete is not None:
                keys[param_key(adapter.hard_concrete.log_theta)] = 0
            gate_key = param_key(adapter.gate_logits)
            keep = compact(adapter)
            for key, axis in keys.items():
                if key in self.optimizer.state:
                    self.optimizer.select(key, keep, axis)
            if self.arch_optimizer is not None and gate_key in self.arch_optimizer.state:
                self.arch_optimizer.select(gate_key, keep, 0)
        self.rebind()

    # ── Steps ─────────────────────────────────────────────────────────────────

    def _noise(self) -> Optional[np.random.Generator]:
        return self.noise_rng if any(a.hard_concrete is not None for a in self.model.adapters.values()) else None

    def _aux_loss(self) -> Dict[str, Tensor]:
        regs = self.config.regularizers
        adapters = [self.model.adapters[m] for m in self.model.module_ids]
        terms: Dict[str, Tensor] = {}
        if regs.orthogonal_weight > 0:
            terms["orthogonal"] = orthogonal_reg(adapters) * regs.orthogonal_weight
        gates = [a.hard_concrete for a in adapters if a.hard_concrete is not None]
        if gates and regs.l0_weight > 0:
            l0 = expected_l0(gates[0])
            for g in gates[1:]:
                l0 = l0 + expected_l0(g)
            terms["l0"] = l0 * regs.l0_weight
        return terms

    def _combine(self, g_main: GradientMap, g_aux: Optional[GradientMap], keys: List[str]):
        ga = self.config.ga
        if g_aux is None:
            return {k: g_main.array(k) for k in keys}, float("nan"), float("nan")
        if ga.mode == "off":
            res = align(g_main.flatten(keys), g_aux.flatten(keys), ga)
            return {k: g_main.array(k) + g_aux.array(k) for k in keys}, res.degrees, float("nan")
        if ga.per_tensor:
            combined, results = align_per_tensor(
                {k: g_main.array(k) for k in keys}, {k: g_aux.array(k) for k in keys}, ga
            )
            degrees = np.nanmean([r.degrees for r in results.values()]) if results else float("nan")
            coefficient = float(np.mean([r.coefficient for r in results.values()])) if results else float("nan")
            return combined, float(degrees), coefficient
        res = align(g_main.flatten(keys), g_aux.flatten(keys), ga)
        flat = GradientMap.from_flat(res.gradient, g_main, keys)
        return {k: flat.array(k) for k in keys}, res.degrees, res.coefficient

    def train_step(self, batch: Batch, phase: str = "train") -> float:
        params = self.model.adapter_parameters()
        keys = [param_key(p) for p in params]
        try:
            ce = lm_loss(self.model, batch, noise=self._noise())
            g_main = backward(ce, params)
            terms = self._aux_loss()
            g_aux = None
            if terms:
                aux = ops.add(*terms.values()) if len(terms) == 2 else next(iter(terms.values()))
                g_aux = backward(aux, params)
        except NumericError as e:
            raise TrainingAborted(str(e), phase, self.round, self.step) from e

        grads, degrees, coefficient = self._combine(g_main, g_aux, keys)
        lr = self.optimizer.step(grads)
        self.metrics.append(
            step=self.step, phase=phase, round=self.round, train_ce=ce.item(),
            orthogonal=terms["orthogonal"].item() if "orthogonal" in terms else None,
            l0=terms["l0"].item() if "l0" in terms else None,
            ga_degrees=degrees, ga_coefficient=coefficient,
            active_total=self.model.total_active(), lr=lr,
        )
        self.step += 1
        return ce.item()

    def arch_step(self, batch: Batch) -> float:
        """One first-order step on the gate logits a' against a held-out batch."""
        gates = self.model.gate_parameters()
        if self.arch_optimizer is None:
            arch_cfg = self.config.optimizer.model_copy(
                update={"lr": self.config.allocator.arch_lr, "warmup_fraction": 0.0, "weight_decay": 0.0}
            )
            self.arch_optimizer = build_optimizer(gates, arch_cfg)
        try:
            ce = lm_loss(self.model, batch)
            g = backward(ce, gates)
        except NumericError as e:
            raise TrainingAborted(str(e), "arch", self.round, self.step) from e
        self.arch_optimizer.step({k: g.array(k) for k in g})
        return ce.item()

    # ── Epochs ────────────────────────────────────────────────────────────────

    def train_epochs(
        self,
        split: Split,
        epochs: int,
        phase: str,
        val_split: Optional[Split] = None,
        patience: Optional[int] = None,
        after_step: Optional[StepHook] = None,
    ) -> List[float]:
        """Run up to `epochs` epochs; returns the validation CE after each epoch."""
        val_history: List[float] = []
        best, stale = float("inf"), 0
        for epoch in range(epochs):
            epoch_rng = np.random.default_rng(self.data_rng.integers(2**63))
            for batch in BatchPrefetcher(split, self.config.optimizer.batch_size, epoch_rng):
                self.train_step(batch, phase)
                if after_step is not None:
                    after_step(self.step)
            self.metrics.flush()
            if val_split is None:
                continue
            val_ce = evaluate_ce(self.model, val_split)
            val_history.append(val_ce)
            logger.info(f"[{phase}] epoch {epoch + 1}/{epochs} step {self.step} val_ce={val_ce:.4f}")
            if patience is None:
                continue
            if val_ce < best:
                best, stale = val_ce, 0
            else:
                stale += 1
                if stale >= patience:
                    logger.info(f"[{phase}] early stop after {epoch + 1} epochs (patience {patience})")
                    break
        return val_history
