# ranklab/ml/gated_lora.py
"""
Gated low-rank adapters.

A host linear layer f(x) = x·W0 + b0 becomes f(x) = x·W0 + b0 + z with
z = scaling · ((x·W_A) ∘ g)·W_B, where g holds one gate per rank:
g_i = 0 for a Pruned rank, otherwise 2·sigmoid(a'_i), times the Hard-Concrete
gate when one is installed, times any per-call override mask.

Pruning is logical (gate_state), so rank indices stay stable inside an
allocation round; `compact` removes Pruned ranks physically.
"""
import math
from typing import Dict, List, Literal, Optional

import numpy as np

from core.errors import ContractError, DimensionError
from ml import ops
from ml.regularizers import (
    HardConcreteGate,
    hard_concrete_mean_gate,
    hard_concrete_sample,
    sample_uniform,
)
from ml.tensor import Tensor, parameter

ACTIVE = 1
PRUNED = 0

NEW_RANK_STD = 0.02


def gate_value(a_prime: float, state: int) -> float:
    if state == PRUNED:
        return 0.0
    if a_prime >= 0:
        return 2.0 / (1.0 + math.exp(-a_prime))
    ex = math.exp(a_prime)
    return 2.0 * ex / (1.0 + ex)


class GateOverride:
    """
    Per-call multiplicative gate masks, keyed by module id. Modules without
    an entry use `default` on every rank. Passed down the forward call, never
    stored on an adapter, so concurrent evaluations can use different views.
    """

    def __init__(self, masks: Optional[Dict[int, np.ndarray]] = None, default: float = 1.0):
        self.masks = masks or {}
        self.default = default

    def mask_for(self, module_id: int, rank: int) -> Optional[np.ndarray]:
        if module_id in self.masks:
            return self.masks[module_id]
        if self.default == 1.0:
            return None
        return np.full(rank, self.default)

    @classmethod
    def without_rank(cls, module_id: int, rank_index: int, rank: int) -> "GateOverride":
        mask = np.ones(rank)
        mask[rank_index] = 0.0
        return cls({module_id: mask})

    @classmethod
    def only_rank(cls, module_id: int, rank_index: int, rank: int) -> "GateOverride":
        mask = np.zeros(rank)
        mask[rank_index] = 1.0
        return cls({module_id: mask}, default=0.0)

    @classmethod
    def all_off(cls) -> "GateOverride":
        return cls(default=0.0)


class GatedLoraAdapter:
    def __init__(
        self,
        module_id: int,
        name: str,
        d_in: int,
        d_out: int,
        rank: int,
        rng: np.random.Generator,
        init: Literal["lora", "normal"] = "lora",
        init_std: float = 0.02,
        scaling: float = 1.0,
    ):
        self.module_id = module_id
        self.name = name
        self.d_in = d_in
        self.d_out = d_out
        self.scaling = scaling
        w_b = rng.normal(0.0, init_std, (rank, d_out)) if init == "normal" else np.zeros((rank, d_out))
        self.W_A = parameter(rng.normal(0.0, init_std, (d_in, rank)), name=f"{name}.W_A")
        self.W_B = parameter(w_b, name=f"{name}.W_B")
        self.gate_logits = Tensor(np.zeros(rank), name=f"{name}.gate_logits")
        self.gate_state = np.full(rank, ACTIVE, dtype=np.uint8)
        self.hard_concrete: Optional[HardConcreteGate] = None

    # ── Bookkeeping ───────────────────────────────────────────────────────────

    @property
    def rank(self) -> int:
        return self.gate_state.shape[0]

    def active_indices(self) -> np.ndarray:
        return np.flatnonzero(self.gate_state == ACTIVE)

    @property
    def n_active(self) -> int:
        return int(np.count_nonzero(self.gate_state == ACTIVE))

    def set_gate_training(self, enabled: bool) -> None:
        self.gate_logits.requires_grad = enabled

    def install_hard_concrete(self, **kwargs) -> HardConcreteGate:
        self.hard_concrete = HardConcreteGate(self.rank, name=self.name, **kwargs)
        return self.hard_concrete

    def parameters(self) -> List[Tensor]:
        params = [self.W_A, self.W_B]
        if self.hard_concrete is not None:
            params.append(self.hard_concrete.log_theta)
        return params

    def gate_values(self) -> np.ndarray:
        """Effective α' per rank, without Hard-Concrete or override factors."""
        return np.array([gate_value(float(a), int(s)) for a, s in zip(self.gate_logits.data, self.gate_state)])

    def gate_vector(
        self,
        mask: Optional[np.ndarray] = None,
        noise: Optional[np.random.Generator] = None,
    ) -> Tensor:
        dtype = self.W_A.data.dtype
        g = ops.sigmoid(self.gate_logits) * 2.0 * self.gate_state.astype(dtype)
        if self.hard_concrete is not None:
            if noise is not None:
                lam = hard_concrete_sample(self.hard_concrete, sample_uniform(noise, self.rank))
            else:
                lam = hard_concrete_mean_gate(self.hard_concrete)
            g = g * lam
        if mask is not None:
            g = g * np.asarray(mask, dtype=dtype)
        return g


# ── Forward ───────────────────────────────────────────────────────────────────

def adapter_forward(
    x: Tensor,
    adapter: GatedLoraAdapter,
    mask: Optional[np.ndarray] = None,
    noise: Optional[np.random.Generator] = None,
) -> Tensor:
    if x.shape[-1] != adapter.d_in:
        raise DimensionError("adapter_forward", x.shape, adapter.W_A.shape)
    if adapter.rank == 0:
        return Tensor(np.zeros(x.shape[:-1] + (adapter.d_out,), dtype=x.data.dtype), dtype=x.data.dtype)
    h = ops.diag_scale(x @ adapter.W_A, adapter.gate_vector(mask, noise))
    z = h @ adapter.W_B
    return z * adapter.scaling if adapter.scaling != 1.0 else z


def linear(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    adapter: Optional[GatedLoraAdapter] = None,
    mask: Optional[np.ndarray] = None,
    noise: Optional[np.random.Generator] = None,
) -> Tensor:
    """Host layer x·W0 (+ b0) plus the adapter's contribution."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError("linear", x.shape, weight.shape)
    out = x @ weight
    if bias is not None:
        out = out + bias
    if adapter is not None:
        out = out + adapter_forward(x, adapter, mask, noise)
    return out


def merge(adapter: GatedLoraAdapter, base_weight: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """W0 + W_A·diag(g)·W_B, a dense matrix with the same action as base plus adapter."""
    if base_weight.shape != (adapter.d_in, adapter.d_out):
        raise DimensionError("merge", base_weight.shape, (adapter.d_in, adapter.d_out))
    if adapter.rank == 0:
        return base_weight
    delta = ops.diag_scale(adapter.W_A, adapter.gate_vector(mask)) @ adapter.W_B
    if adapter.scaling != 1.0:
        delta = delta * adapter.scaling
    return base_weight + delta


# ── Structural edits ──────────────────────────────────────────────────────────

def prune_rank(adapter: GatedLoraAdapter, i: int) -> None:
    if not 0 <= i < adapter.rank:
        raise ContractError(f"{adapter.name}: rank index {i} out of range [0, {adapter.rank})")
    if adapter.gate_state[i] == PRUNED:
        raise ContractError(f"{adapter.name}: rank {i} is already pruned")
    adapter.gate_state[i] = PRUNED


def grow_ranks(
    adapter: GatedLoraAdapter,
    delta_r: int,
    rng: np.random.Generator,
    init: Literal["random", "mean"] = "random",
) -> None:
    """
    Append `delta_r` Active ranks. New W_B rows are zero, so the adapter's
    output is unchanged until the next optimizer step.
    """
    if delta_r < 1:
        raise ContractError(f"{adapter.name}: grow_ranks needs delta_r >= 1, got {delta_r}")
    dtype = adapter.W_A.data.dtype
    active = adapter.active_indices()
    if init == "mean" and active.size:
        column = adapter.W_A.data[:, active].mean(axis=1, keepdims=True)
        new_a = np.repeat(column, delta_r, axis=1)
    else:
        new_a = rng.normal(0.0, NEW_RANK_STD, (adapter.d_in, delta_r))

    adapter.W_A = parameter(
        np.concatenate([adapter.W_A.data, new_a.astype(dtype)], axis=1), name=adapter.W_A.name
    )
    adapter.W_B = parameter(
        np.concatenate([adapter.W_B.data, np.zeros((delta_r, adapter.d_out), dtype=dtype)], axis=0),
        name=adapter.W_B.name,
    )
    logits = adapter.gate_logits
    adapter.gate_logits = Tensor(
        np.concatenate([logits.data, np.zeros(delta_r, dtype=logits.data.dtype)]),
        requires_grad=logits.requires_grad,
        name=logits.name,
    )
    adapter.gate_state = np.concatenate([adapter.gate_state, np.full(delta_r, ACTIVE, dtype=np.uint8)])
    hc = adapter.hard_concrete
    if hc is not None:
        hc.log_theta = parameter(
            np.concatenate([hc.log_theta.data, np.full(delta_r, hc.log_theta_init, dtype=hc.log_theta.data.dtype)]),
            name=hc.log_theta.name,
        )


def compact(adapter: GatedLoraAdapter) -> np.ndarray:
    """Physically drop Pruned ranks; returns the kept (old) indices."""
    keep = adapter.active_indices()
    if keep.size == adapter.rank:
        return keep
    adapter.W_A = parameter(adapter.W_A.data[:, keep], name=adapter.W_A.name)
    adapter.W_B = parameter(adapter.W_B.data[keep, :], name=adapter.W_B.name)
    logits = adapter.gate_logits
    adapter.gate_logits = Tensor(logits.data[keep], requires_grad=logits.requires_grad, name=logits.name)
    adapter.gate_state = adapter.gate_state[keep]
    if adapter.hard_concrete is not None:
        hc = adapter.hard_concrete
        hc.log_theta = parameter(hc.log_theta.data[keep], name=hc.log_theta.name)
    return keep