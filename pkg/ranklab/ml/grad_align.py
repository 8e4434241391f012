# ranklab/ml/grad_align.py
"""
Gradient alignment: measure the angle between the main-loss gradient and an
auxiliary (regularizer) gradient, and fold the auxiliary gradient in only
through its projection onto the main direction.

Every combined gradient is c·g_main for a scalar c, so the update never
leaves the main-loss direction.
"""
import math
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from core.errors import DegenerateGradientError
from schemas.config import GAConfig


@dataclass
class AlignResult:
    gradient: np.ndarray
    coefficient: float
    degrees: float
    applied: bool


def _norms(g_main: np.ndarray, g_aux: np.ndarray, epsilon_norm: float) -> Tuple[float, float]:
    if g_main.shape != g_aux.shape:
        raise ValueError(f"grad_align: shape mismatch {g_main.shape} vs {g_aux.shape}")
    n_main = float(np.linalg.norm(g_main))
    n_aux = float(np.linalg.norm(g_aux))
    if n_main <= epsilon_norm or n_aux <= epsilon_norm:
        raise DegenerateGradientError(f"gradient norm below {epsilon_norm} (main {n_main:.3e}, aux {n_aux:.3e})")
    return n_main, n_aux


def grad_angle(g_main: np.ndarray, g_aux: np.ndarray, epsilon_norm: float = 1e-12) -> Tuple[float, float]:
    """(cos θ, θ in degrees) between the two flat gradients."""
    n_main, n_aux = _norms(g_main, g_aux, epsilon_norm)
    cos = float(np.dot(g_aux, g_main)) / (n_aux * n_main)
    cos = min(1.0, max(-1.0, cos))
    return cos, math.degrees(math.acos(cos))


def _projection_coefficient(g_main: np.ndarray, g_aux: np.ndarray, epsilon_norm: float) -> float:
    # ‖g_aux‖·cosθ/‖g_main‖ == (g_aux·g_main)/(g_main·g_main)
    n_main, _ = _norms(g_main, g_aux, epsilon_norm)
    return float(np.dot(g_aux, g_main)) / (n_main * n_main)


def project(g_aux: np.ndarray, g_main: np.ndarray, epsilon_norm: float = 1e-12) -> np.ndarray:
    """Signed vector projection of g_aux onto g_main."""
    return _projection_coefficient(g_main, g_aux, epsilon_norm) * g_main


def align(g_main: np.ndarray, g_aux: np.ndarray, config: GAConfig) -> AlignResult:
    """
    combine() plus the numbers the metrics log needs. `coefficient` is the
    scalar c with g_GA = c·g_main; `degrees` is NaN when the angle is
    undefined (degenerate norms), in which case g_main is returned as is.
    """
    if config.mode == "off":
        try:
            _, degrees = grad_angle(g_main, g_aux, config.epsilon_norm)
        except DegenerateGradientError:
            degrees = float("nan")
        return AlignResult(g_main, 1.0, degrees, False)

    try:
        cos, degrees = grad_angle(g_main, g_aux, config.epsilon_norm)
        p = _projection_coefficient(g_main, g_aux, config.epsilon_norm)
    except DegenerateGradientError:
        return AlignResult(g_main, 1.0, float("nan"), False)

    if config.mode == "hard" and cos < 0.0:
        return AlignResult(g_main, 1.0, degrees, False)
    coefficient = (1.0 - config.alpha) + config.alpha * p
    return AlignResult(coefficient * g_main, coefficient, degrees, True)


def combine(g_main: np.ndarray, g_aux: np.ndarray, config: GAConfig) -> np.ndarray:
    return align(g_main, g_aux, config).gradient


def align_per_tensor(
    g_main: Dict[str, np.ndarray],
    g_aux: Dict[str, np.ndarray],
    config: GAConfig,
) -> Tuple[Dict[str, np.ndarray], Dict[str, AlignResult]]:
    """One angle per parameter tensor instead of one global angle."""
    combined: Dict[str, np.ndarray] = {}
    results: Dict[str, AlignResult] = {}
    for key, main in g_main.items():
        res = align(main.reshape(-1), g_aux[key].reshape(-1), config)
        combined[key] = res.gradient.reshape(main.shape)
        results[key] = res
    return combined, results
