# ranklab/ml/optim.py
"""
SGD with momentum and AdamW over named adapter parameters.

Optimizer state is keyed by parameter name, not by object, because
grow_ranks / compact replace the parameter tensors. After a structural edit
call `rebind` (growth: new slots get zero state) or `select` (compaction).
"""
import logging
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from core.errors import ContractError
from ml.tensor import Tensor, param_key
from schemas.config import OptimizerConfig

logger = logging.getLogger("optim")


def lr_at(step: int, total_steps: Optional[int], base_lr: float, warmup_fraction: float) -> float:
    """Linear warm-up over warmup_fraction·total_steps, then linear decay to 0."""
    if not total_steps:
        return base_lr
    warmup = int(round(warmup_fraction * total_steps))
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    remaining = max(total_steps - warmup, 1)
    return base_lr * max(0.0, 1.0 - (step - warmup) / remaining)


def _resize(state: np.ndarray, shape) -> np.ndarray:
    """Zero-pad `state` at the end of whichever axes grew."""
    if state.shape == tuple(shape):
        return state
    if state.ndim != len(shape) or any(s > t for s, t in zip(state.shape, shape)):
        raise ContractError(f"cannot grow optimizer state {state.shape} to {tuple(shape)}")
    pad = [(0, t - s) for s, t in zip(state.shape, shape)]
    return np.pad(state, pad)


class Optimizer:
    slots: Sequence[str] = ()

    def __init__(self, params: Sequence[Tensor], config: OptimizerConfig, total_steps: Optional[int] = None):
        self.config = config
        self.total_steps = total_steps
        self.t = 0
        self.params: Dict[str, Tensor] = {}
        self.state: Dict[str, Dict[str, np.ndarray]] = {}
        self.rebind(params)

    @property
    def lr(self) -> float:
        return lr_at(self.t, self.total_steps, self.config.lr, self.config.warmup_fraction)

    def rebind(self, params: Sequence[Tensor]) -> None:
        """Point at the current parameter tensors, padding state for grown ones."""
        self.params = {param_key(p): p for p in params}
        for key, p in self.params.items():
            slots = self.state.get(key)
            if slots is None:
                self.state[key] = {s: np.zeros_like(p.data) for s in self.slots}
            else:
                for s in self.slots:
                    slots[s] = _resize(slots[s], p.shape)
        for key in list(self.state):
            if key not in self.params:
                del self.state[key]

    def select(self, key: str, keep: np.ndarray, axis: int) -> None:
        """Keep only indices `keep` along `axis` of a parameter's state."""
        for s in self.slots:
            self.state[key][s] = np.take(self.state[key][s], keep, axis=axis)

    def step(self, grads: Mapping[str, np.ndarray]) -> float:
        lr = self.lr
        for key, p in self.params.items():
            g = grads.get(key)
            if g is None:
                continue
            self._update(p, np.asarray(g, dtype=p.data.dtype), self.state[key], lr)
        self.t += 1
        return lr

    def _update(self, p: Tensor, g: np.ndarray, state: Dict[str, np.ndarray], lr: float) -> None:
        raise NotImplementedError


class SGDMomentum(Optimizer):
    slots = ("velocity",)

    def _update(self, p, g, state, lr):
        if self.config.weight_decay:
            g = g + self.config.weight_decay * p.data
        v = state["velocity"]
        v *= self.config.momentum
        v += g
        p.data -= (lr * v).astype(p.data.dtype)


class AdamW(Optimizer):
    slots = ("m", "v")

    def _update(self, p, g, state, lr):
        beta1, beta2 = self.config.betas
        m, v = state["m"], state["v"]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        t = self.t + 1
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        update = m_hat / (np.sqrt(v_hat) + self.config.eps)
        if self.config.weight_decay:
            update = update + self.config.weight_decay * p.data
        p.data -= (lr * update).astype(p.data.dtype)


def build_optimizer(params: List[Tensor], config: OptimizerConfig, total_steps: Optional[int] = None) -> Optimizer:
    cls = SGDMomentum if config.kind == "sgd_momentum" else AdamW
    logger.debug(f"[optim] {cls.__name__} lr={config.lr} over {len(params)} tensors, {total_steps} planned steps")
    return cls(params, config, total_steps)
