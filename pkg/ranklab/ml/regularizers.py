# ranklab/ml/regularizers.py
"""
Hard-Concrete rank gates with a closed-form expected L0 norm, and the
trace-normalized orthogonality penalty on adapter factors.

Stretch interval convention: samples are stretched to (gamma_lower,
zeta_upper) with gamma_lower < 0 < 1 < zeta_upper, so the hard-sigmoid clip
puts point mass on both 0 and 1.
"""
import math
from typing import TYPE_CHECKING, Iterable, Optional

import numpy as np

from core.errors import ConfigurationError
from ml import ops
from ml.tensor import Tensor, parameter

if TYPE_CHECKING:
    from ml.gated_lora import GatedLoraAdapter

U_CLAMP = 1e-6


class HardConcreteGate:
    def __init__(
        self,
        rank: int,
        name: str,
        log_theta_init: float = 2.0,
        tau: float = 2.0 / 3.0,
        gamma_lower: float = -0.1,
        zeta_upper: float = 1.1,
    ):
        if tau <= 0:
            raise ConfigurationError("regularizers.tau", f"must be > 0, got {tau}")
        if gamma_lower >= 0:
            raise ConfigurationError("regularizers.gamma_lower", f"must be < 0, got {gamma_lower}")
        if zeta_upper <= 1:
            raise ConfigurationError("regularizers.zeta_upper", f"must be > 1, got {zeta_upper}")
        self.name = name
        self.tau = tau
        self.gamma_lower = gamma_lower
        self.zeta_upper = zeta_upper
        self.log_theta_init = log_theta_init
        self.log_theta = parameter(np.full(rank, log_theta_init), name=f"{name}.log_theta")

    @property
    def rank(self) -> int:
        return self.log_theta.shape[0]

    @property
    def l0_shift(self) -> float:
        """τ·log(−γ/ζ), the offset inside the closed-form L0 term."""
        return self.tau * math.log(-self.gamma_lower / self.zeta_upper)

    def _stretch(self, s: Tensor) -> Tensor:
        return s * (self.zeta_upper - self.gamma_lower) + self.gamma_lower


def sample_uniform(rng: np.random.Generator, size: int) -> np.ndarray:
    return np.clip(rng.uniform(0.0, 1.0, size), U_CLAMP, 1.0 - U_CLAMP)


def hard_concrete_sample(gate: HardConcreteGate, u: np.ndarray) -> Tensor:
    u = np.clip(np.asarray(u, dtype=np.float64), U_CLAMP, 1.0 - U_CLAMP)
    noise = (np.log(u) - np.log1p(-u)).astype(gate.log_theta.data.dtype)
    s = ops.sigmoid((gate.log_theta + noise) / gate.tau)
    return ops.clip(gate._stretch(s), 0.0, 1.0)


def hard_concrete_mean_gate(gate: HardConcreteGate) -> Tensor:
    """Noise-free gate used at evaluation time."""
    return ops.clip(gate._stretch(ops.sigmoid(gate.log_theta)), 0.0, 1.0)


def expected_l0(gate: HardConcreteGate) -> Tensor:
    """Σ_k P(λ_k > 0) = Σ_k sigmoid(log θ_k − τ·log(−γ/ζ))."""
    return ops.sum(ops.sigmoid(gate.log_theta - gate.l0_shift))


# ── Orthogonality ─────────────────────────────────────────────────────────────

def _normalized_gram_distance(gram: Tensor, r: int) -> Tensor:
    """‖G/Trace(G) − I/r‖_F²; a zero Gram matrix scores the constant 1/r."""
    t = ops.trace(gram)
    if t.data == 0:
        return Tensor(1.0 / r, dtype=gram.data.dtype)
    eye = np.eye(r, dtype=gram.data.dtype) / r
    diff = gram / t - eye
    return ops.sum(diff * diff)


def orthogonal_reg(adapters: Iterable["GatedLoraAdapter"]) -> Tensor:
    total: Optional[Tensor] = None
    for adapter in adapters:
        idx = adapter.active_indices()
        r = len(idx)
        if r == 0:
            continue
        w_a = ops.take(adapter.W_A, idx, axis=1)
        w_b = ops.take(adapter.W_B, idx, axis=0)
        for gram in (w_b @ w_b.T, w_a.T @ w_a):
            term = _normalized_gram_distance(gram, r)
            total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)
