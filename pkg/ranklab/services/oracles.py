# ranklab/services/oracles.py
"""
Self-test oracle suites, run by `ranklab selftest`.

Each suite builds its own seeded fixtures in float64, measures the worst
deviation from an independent oracle and compares it with a fixed tolerance.
"""
import logging
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ml import ops
from ml.gated_lora import (
    GatedLoraAdapter,
    GateOverride,
    adapter_forward,
    compact,
    linear,
    merge,
    prune_rank,
)
from ml.grad_align import align
from ml.gradcheck import finite_diff_check
from ml.regularizers import (
    HardConcreteGate,
    expected_l0,
    hard_concrete_sample,
    orthogonal_reg,
    sample_uniform,
)
from ml.tensor import Tensor, no_grad, parameter, precision
from ml.transformer import SuperNetwork, build_supernetwork, lm_loss
from schemas.config import GAConfig, ModelConfig
from services.allocator import importance_scores

logger = logging.getLogger("oracles")

GRAD_TOL = 1e-4
EXACT_TOL = 1e-12
MERGE_TOL = 1e-10
GEOMETRY_TOL = 1e-10


@dataclass
class OracleResult:
    name: str
    passed: bool
    worst: float
    tolerance: float
    seconds: float
    detail: str = ""


# ── Fixtures ──────────────────────────────────────────────────────────────────

def tiny_model(
    seed: int = 0,
    layers: int = 1,
    d: int = 16,
    rank: int = 2,
    vocab: int = 12,
    max_seq_len: int = 8,
    init: str = "normal",
) -> SuperNetwork:
    config = ModelConfig(layers=layers, d=d, heads=2, d_ff=2 * d, vocab=vocab, max_seq_len=max_seq_len)
    return build_supernetwork(
        config, rank * config.n_modules, np.random.default_rng(seed), adapter_init=init, adapter_init_std=0.2,
    )


def tiny_tokens(model: SuperNetwork, n: int = 4, seed: int = 1) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(1, model.config.vocab, size=(n, model.config.max_seq_len))


def random_adapter(rng: np.random.Generator, rank: int, d_in: int = 6, d_out: int = 5) -> GatedLoraAdapter:
    adapter = GatedLoraAdapter(0, "sample", d_in, d_out, rank, rng, init="normal", init_std=0.5)
    adapter.gate_logits.data[:] = rng.normal(size=rank)
    return adapter


def _weighted_sum(fn: Callable[[], Tensor], rng: np.random.Generator) -> Callable[[], Tensor]:
    with no_grad():
        shape = fn().shape
    weights = rng.normal(size=shape)
    return lambda: ops.sum(fn() * weights)


def primitive_cases(rng: np.random.Generator) -> Dict[str, Tuple[Callable[[], Tensor], List[Tensor]]]:
    """name → (scalar loss builder, parameters) for every differentiable primitive."""
    def p(*shape, positive=False, name="x"):
        data = rng.normal(size=shape)
        return parameter(np.abs(data) + 0.5 if positive else data, name=name)

    a, b = p(3, 4, name="a"), p(3, 4, name="b")
    pos = p(3, 4, positive=True, name="pos")
    row = p(4, name="row")
    m1, m2 = p(2, 3, 4, name="m1"), p(4, 5, name="m2")
    v = p(4, name="v")
    sq = p(4, 4, name="sq")
    logits, targets = p(5, 6, name="logits"), rng.integers(0, 6, size=5)
    idx = np.array([2, 0, 2, 1])
    mask = np.tril(np.ones((4, 4), dtype=bool))

    raw = {
        "add": (lambda: ops.add(a, row), [a, row]),
        "sub": (lambda: ops.sub(a, b), [a, b]),
        "mul": (lambda: ops.mul(a, b), [a, b]),
        "div": (lambda: ops.div(a, pos), [a, pos]),
        "neg": (lambda: ops.neg(a), [a]),
        "power": (lambda: ops.power(pos, 3.0), [pos]),
        "exp": (lambda: ops.exp(a), [a]),
        "log": (lambda: ops.log(pos), [pos]),
        "clip": (lambda: ops.clip(a, -0.5, 0.5), [a]),
        "sigmoid": (lambda: ops.sigmoid(a), [a]),
        "relu": (lambda: ops.relu(a), [a]),
        "gelu": (lambda: ops.gelu(a), [a]),
        "softmax": (lambda: ops.softmax(sq, mask), [sq]),
        "layer_norm": (lambda: ops.layer_norm(a), [a]),
        "matmul": (lambda: ops.matmul(m1, m2), [m1, m2]),
        "diag_scale": (lambda: ops.diag_scale(a, v), [a, v]),
        "transpose": (lambda: ops.transpose(m1), [m1]),
        "permute": (lambda: ops.permute(m1, (2, 0, 1)), [m1]),
        "reshape": (lambda: ops.reshape(m1, (6, 4)), [m1]),
        "concat": (lambda: ops.concat([a, b], axis=1), [a, b]),
        "take": (lambda: ops.take(sq, idx, axis=1), [sq]),
        "trace": (lambda: ops.trace(sq), [sq]),
        "sum": (lambda: ops.sum(m1, axis=1), [m1]),
        "mean": (lambda: ops.mean(m1, axis=2, keepdims=True), [m1]),
        "frobenius_norm": (lambda: ops.frobenius_norm(a), [a]),
        "cross_entropy": (lambda: ops.cross_entropy_with_logits(logits, targets), [logits]),
    }
    return {name: (_weighted_sum(fn, rng), params) for name, (fn, params) in raw.items()}


# ── Suites ────────────────────────────────────────────────────────────────────

def gradient_fidelity(seed: int = 0) -> Tuple[float, str]:
    rng = np.random.default_rng(seed)
    errors: Dict[str, float] = {}
    for name, (loss_fn, params) in primitive_cases(rng).items():
        errors[name] = finite_diff_check(loss_fn, params)

    model = tiny_model(seed)
    tokens = tiny_tokens(model)
    errors["lm_loss"] = finite_diff_check(lambda: lm_loss(model, tokens), model.adapter_parameters())

    gate = HardConcreteGate(6, "hc", log_theta_init=0.0)
    gate.log_theta.data[:] = rng.normal(size=6)
    errors["expected_l0"] = finite_diff_check(lambda: expected_l0(gate), [gate.log_theta])

    adapter = random_adapter(rng, 3, 8, 8)
    errors["orthogonal_reg"] = finite_diff_check(lambda: orthogonal_reg([adapter]), [adapter.W_A, adapter.W_B])

    worst = max(errors, key=errors.get)
    return errors[worst], f"worst: {worst}"


def gate_zero_equivalence(seed: int = 0, trials: int = 200) -> Tuple[float, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        rank = int(rng.integers(2, 9))
        adapter = random_adapter(rng, rank)
        for i in rng.choice(rank, size=int(rng.integers(1, rank)), replace=False):
            prune_rank(adapter, int(i))
        x = Tensor(rng.normal(size=(4, adapter.d_in)))
        with no_grad():
            gated = adapter_forward(x, adapter).data
            compact(adapter)
            compacted = adapter_forward(x, adapter).data
        worst = max(worst, float(np.max(np.abs(gated - compacted))))
    return worst, f"{trials} adapters"


def merge_equivalence(seed: int = 0, trials: int = 100) -> Tuple[float, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        adapter = random_adapter(rng, int(rng.integers(1, 9)))
        w0 = Tensor(rng.normal(size=(adapter.d_in, adapter.d_out)))
        x = Tensor(rng.normal(size=(3, adapter.d_in)))
        with no_grad():
            additive = linear(x, w0, adapter=adapter).data
            merged = (x @ merge(adapter, w0)).data
        worst = max(worst, float(np.max(np.abs(additive - merged))))
    return worst, f"{trials} triples"


def rank_one_slice(adapter: GatedLoraAdapter, i: int) -> GatedLoraAdapter:
    """A standalone rank-1 adapter holding column i of W_A, row i of W_B and gate logit i."""
    part = GatedLoraAdapter(
        adapter.module_id, f"{adapter.name}.r{i}", adapter.d_in, adapter.d_out, 1,
        np.random.default_rng(0), scaling=adapter.scaling,
    )
    part.W_A.data = adapter.W_A.data[:, [i]].copy()
    part.W_B.data = adapter.W_B.data[[i], :].copy()
    part.gate_logits.data = adapter.gate_logits.data[[i]].copy()
    part.gate_state[0] = adapter.gate_state[i]
    return part


def rank_one_decomposition(seed: int = 0, ranks: Sequence[int] = (1, 2, 4, 8)) -> Tuple[float, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for rank in ranks:
        adapter = random_adapter(rng, rank)
        x = Tensor(rng.normal(size=(5, adapter.d_in)))
        with no_grad():
            full = adapter_forward(x, adapter).data
            parts = sum(adapter_forward(x, rank_one_slice(adapter, i)).data for i in range(rank))
        worst = max(worst, float(np.max(np.abs(full - parts))))
    return worst, f"ranks {list(ranks)}"


def exhaustive_importance(model: SuperNetwork, tokens: np.ndarray) -> Dict[Tuple[int, int], Tuple[float, float]]:
    """(S_without, S_alone) per Active rank from explicit per-module masks."""
    out = {}
    with no_grad():
        for m in model.module_ids:
            for i in model.adapters[m].active_indices():
                without = {k: np.ones(model.adapters[k].rank) for k in model.module_ids}
                alone = {k: np.zeros(model.adapters[k].rank) for k in model.module_ids}
                without[m][i] = 0.0
                alone[m][i] = 1.0
                s_without = -lm_loss(model, tokens, gates=GateOverride(without)).item()
                s_alone = -lm_loss(model, tokens, gates=GateOverride(alone)).item()
                out[(m, int(i))] = (s_without, s_alone)
    return out


def importance_oracle(seed: int = 0) -> Tuple[float, str]:
    model = tiny_model(seed, layers=1, d=16, rank=2)
    tokens = tiny_tokens(model, n=6)
    report = importance_scores(model, tokens)
    expected = exhaustive_importance(model, tokens)
    worst = 0.0
    for s in report.per_rank:
        s_w, s_a = expected[(s.module_id, s.rank_index)]
        worst = max(worst, abs(s.S_without - s_w), abs(s.S_alone - s_a), abs(s.IS - (-s_w + s_a)))
    return worst, f"{len(report.per_rank)} ranks"


def hard_concrete_consistency(seed: int = 0, points: int = 50, draws: int = 100_000) -> Tuple[float, str]:
    """Worst |MC − closed form| in units of standard error; passes below 3."""
    rng = np.random.default_rng(seed)
    gate = HardConcreteGate(points, "hc")
    gate.log_theta.data[:] = rng.uniform(-3.0, 3.0, size=points)
    expected = ops.sigmoid(gate.log_theta - gate.l0_shift).data
    nonzero = np.zeros(points)
    chunk = 10_000
    with no_grad():
        for _ in range(draws // chunk):
            u = sample_uniform(rng, (chunk, points))
            nonzero += (hard_concrete_sample(gate, u).data > 0).sum(axis=0)
    empirical = nonzero / draws
    se = np.sqrt(expected * (1 - expected) / draws)
    return float(np.max(np.abs(empirical - expected) / se)), f"{points} log θ values, {draws} draws"


def soft_cos(g_main: np.ndarray, g_aux: np.ndarray) -> float:
    return float(g_aux @ g_main / (np.linalg.norm(g_aux) * np.linalg.norm(g_main)))


def ga_geometry(seed: int = 0, pairs: int = 1000) -> Tuple[float, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(pairs):
        n = int(rng.integers(2, 20))
        g_main, g_aux = rng.normal(size=n), rng.normal(size=n)
        alpha = float(rng.uniform(0.0, 0.99))
        soft = align(g_main, g_aux, GAConfig(alpha=alpha, mode="soft"))
        hard = align(g_main, g_aux, GAConfig(alpha=alpha, mode="hard"))
        closed = (1 - alpha) + alpha * np.linalg.norm(g_aux) * soft_cos(g_main, g_aux) / np.linalg.norm(g_main)
        worst = max(worst, abs(soft.coefficient - closed))
        for res in (soft, hard):
            along = (res.gradient @ g_main) / (g_main @ g_main) * g_main
            residual = np.linalg.norm(res.gradient - along)
            worst = max(worst, residual / max(np.linalg.norm(res.gradient), 1e-300))
        if hard.coefficient < 1 - alpha - GEOMETRY_TOL:
            worst = max(worst, 1.0)
    opposed = rng.normal(size=8)
    if not np.array_equal(align(opposed, -opposed, GAConfig(mode="hard")).gradient, opposed):
        worst = max(worst, 1.0)
    return worst, f"{pairs} pairs"


def orthogonal_properties(seed: int = 0, trials: int = 100) -> Tuple[float, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for _ in range(trials):
            rank = int(rng.integers(1, 5))
            adapter = random_adapter(rng, rank, 8, 8)
            base = orthogonal_reg([adapter]).item()
            adapter.W_B.data *= rng.uniform(0.1, 10.0) * rng.choice([-1.0, 1.0])
            worst = max(worst, abs(orthogonal_reg([adapter]).item() - base))

            q_a, _ = np.linalg.qr(rng.normal(size=(8, rank)))
            q_b, _ = np.linalg.qr(rng.normal(size=(8, rank)))
            adapter.W_A.data[:] = q_a * rng.uniform(0.1, 10.0)
            adapter.W_B.data[:] = q_b.T * rng.uniform(0.1, 10.0)
            worst = max(worst, abs(orthogonal_reg([adapter]).item()))
    return worst, f"{trials} factor pairs"


SUITES: Dict[str, Tuple[Callable[[int], Tuple[float, str]], float]] = {
    "gradients": (gradient_fidelity, GRAD_TOL),
    "gate_zero": (gate_zero_equivalence, EXACT_TOL),
    "merge": (merge_equivalence, MERGE_TOL),
    "rank_one": (rank_one_decomposition, EXACT_TOL),
    "importance": (importance_oracle, EXACT_TOL),
    "hard_concrete": (hard_concrete_consistency, 3.0),
    "grad_align": (ga_geometry, GEOMETRY_TOL),
    "orthogonal": (orthogonal_properties, GEOMETRY_TOL),
}


def run_selftest(names: Optional[Sequence[str]] = None, seed: int = 0) -> List[OracleResult]:
    results = []
    with precision("float64"):
        for name in names or list(SUITES):
            fn, tol = SUITES[name]
            started = time.perf_counter()
            worst, detail = fn(seed)
            elapsed = time.perf_counter() - started
            passed = bool(worst <= tol)
            if not passed:
                logger.warning(f"[selftest] {name}: worst {worst:.3e} exceeds {tol:.1e} ({detail})")
            results.append(OracleResult(name, passed, worst, tol, elapsed, detail))
    return results
