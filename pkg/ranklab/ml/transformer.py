# ranklab/ml/transformer.py
"""
Decoder-only toy transformer whose six block matrices (Q, K, V, O, U, D)
each carry one gated low-rank adapter.

Layout per block (pre-norm residual):
    H ← H + MHA(LN(H))
    H ← H + FFN(LN(H))
followed by a final LN and a frozen read-out head. Every base tensor is
frozen; only adapter parameters are trained.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from core.errors import ConfigurationError, ContractError, DimensionError
from ml import ops
from ml.gated_lora import GatedLoraAdapter, GateOverride, linear
from ml.tensor import Tensor, no_grad
from schemas.config import ModelConfig

logger = logging.getLogger("transformer")

SLOTS: Tuple[str, ...] = ("q", "k", "v", "o", "up", "down")
N_MOD = len(SLOTS)
BASE_STD = 0.02


def module_id_for(layer: int, slot: str) -> int:
    return layer * N_MOD + SLOTS.index(slot)


def module_name_for(module_id: int) -> str:
    return f"L{module_id // N_MOD}.{SLOTS[module_id % N_MOD]}"


@dataclass
class BlockWeights:
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    W_O: Tensor
    W_U: Tensor
    W_D: Tensor
    b_U: Tensor
    b_D: Tensor
    heads: int
    module_ids: Tuple[int, ...]

    def weight(self, slot: str) -> Tensor:
        return {
            "q": self.W_Q, "k": self.W_K, "v": self.W_V,
            "o": self.W_O, "up": self.W_U, "down": self.W_D,
        }[slot]

    def tensors(self) -> Dict[str, Tensor]:
        return {
            "W_Q": self.W_Q, "W_K": self.W_K, "W_V": self.W_V, "W_O": self.W_O,
            "W_U": self.W_U, "W_D": self.W_D, "b_U": self.b_U, "b_D": self.b_D,
        }


AdapterMap = Optional[Dict[str, GatedLoraAdapter]]


def _slot_kwargs(slot: str, adapters: AdapterMap, gates: Optional[GateOverride], noise) -> dict:
    if not adapters or slot not in adapters:
        return {}
    adapter = adapters[slot]
    mask = gates.mask_for(adapter.module_id, adapter.rank) if gates is not None else None
    return {"adapter": adapter, "mask": mask, "noise": noise}


# ── Sub-layers ────────────────────────────────────────────────────────────────

def mha_forward(
    H: Tensor,
    weights: BlockWeights,
    causal_mask: bool = True,
    adapters: AdapterMap = None,
    gates: Optional[GateOverride] = None,
    noise: Optional[np.random.Generator] = None,
    return_weights: bool = False,
) -> Union[Tensor, Tuple[Tensor, Tensor]]:
    """Multi-head scaled dot-product attention over H (l×d or batch×l×d)."""
    d = weights.W_Q.shape[0]
    if H.shape[-1] != d:
        raise DimensionError("mha_forward", H.shape, weights.W_Q.shape)
    squeeze = H.ndim == 2
    if squeeze:
        H = ops.reshape(H, (1,) + H.shape)
    batch, length, _ = H.shape
    heads = weights.heads
    dh = d // heads

    def split(x: Tensor) -> Tensor:
        return ops.permute(ops.reshape(x, (batch, length, heads, dh)), (0, 2, 1, 3))

    q = split(linear(H, weights.W_Q, **_slot_kwargs("q", adapters, gates, noise)))
    k = split(linear(H, weights.W_K, **_slot_kwargs("k", adapters, gates, noise)))
    v = split(linear(H, weights.W_V, **_slot_kwargs("v", adapters, gates, noise)))

    scores = (q @ ops.transpose(k)) * (1.0 / math.sqrt(dh))
    mask = np.tril(np.ones((length, length), dtype=bool)) if causal_mask else None
    attn = ops.softmax(scores, mask)
    mixed = ops.reshape(ops.permute(attn @ v, (0, 2, 1, 3)), (batch, length, d))
    out = linear(mixed, weights.W_O, **_slot_kwargs("o", adapters, gates, noise))

    if squeeze:
        out = ops.reshape(out, (length, d))
    return (out, attn) if return_weights else out


def ffn_forward(
    H: Tensor,
    weights: BlockWeights,
    activation: str = "gelu",
    adapters: AdapterMap = None,
    gates: Optional[GateOverride] = None,
    noise: Optional[np.random.Generator] = None,
) -> Tensor:
    """g(H·W_U + b_U)·W_D + b_D."""
    if H.shape[-1] != weights.W_U.shape[0]:
        raise DimensionError("ffn_forward", H.shape, weights.W_U.shape)
    act = ops.relu if activation == "relu" else ops.gelu
    hidden = act(linear(H, weights.W_U, weights.b_U, **_slot_kwargs("up", adapters, gates, noise)))
    return linear(hidden, weights.W_D, weights.b_D, **_slot_kwargs("down", adapters, gates, noise))


# ── Super-network ─────────────────────────────────────────────────────────────

class SuperNetwork:
    def __init__(
        self,
        config: ModelConfig,
        embedding: Tensor,
        positions: Tensor,
        blocks: List[BlockWeights],
        head: Tensor,
        adapters: Optional[Dict[int, GatedLoraAdapter]] = None,
    ):
        self.config = config
        self.embedding = embedding
        self.positions = positions
        self.blocks = blocks
        self.head = head
        self.adapters: Dict[int, GatedLoraAdapter] = adapters or {}

    # ── Views ─────────────────────────────────────────────────────────────────

    @property
    def module_ids(self) -> List[int]:
        return sorted(self.adapters)

    def module_names(self) -> Dict[int, str]:
        return {m: module_name_for(m) for m in self.module_ids}

    def block_adapters(self, layer: int) -> Dict[str, GatedLoraAdapter]:
        out = {}
        for slot in SLOTS:
            adapter = self.adapters.get(module_id_for(layer, slot))
            if adapter is not None:
                out[slot] = adapter
        return out

    def active_rank_map(self) -> Dict[int, int]:
        return {m: self.adapters[m].n_active for m in self.module_ids}

    def total_active(self) -> int:
        return sum(self.active_rank_map().values())

    def adapter_parameters(self) -> List[Tensor]:
        params: List[Tensor] = []
        for m in self.module_ids:
            params.extend(self.adapters[m].parameters())
        return params

    def gate_parameters(self) -> List[Tensor]:
        return [self.adapters[m].gate_logits for m in self.module_ids]

    def set_gate_training(self, enabled: bool) -> None:
        for adapter in self.adapters.values():
            adapter.set_gate_training(enabled)

    def base_tensors(self) -> Dict[str, Tensor]:
        out = {"embedding": self.embedding, "positions": self.positions, "head": self.head}
        for i, block in enumerate(self.blocks):
            for key, tensor in block.tensors().items():
                out[f"blocks.{i}.{key}"] = tensor
        return out

    # ── Forward ───────────────────────────────────────────────────────────────

    def forward(
        self,
        tokens: np.ndarray,
        gates: Optional[GateOverride] = None,
        noise: Optional[np.random.Generator] = None,
        use_adapters: bool = True,
    ) -> Tensor:
        """tokens (batch×l) → logits (batch×l×vocab)."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        length = tokens.shape[1]
        if length > self.config.max_seq_len:
            raise DimensionError("forward", tokens.shape, (self.config.max_seq_len,))
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab):
            raise ContractError(f"token ids must lie in [0, {self.config.vocab})")

        H = ops.take(self.embedding, tokens, axis=0) + self.positions.data[:length]
        for layer, block in enumerate(self.blocks):
            adapters = self.block_adapters(layer) if use_adapters else None
            H = H + mha_forward(ops.layer_norm(H), block, True, adapters, gates, noise)
            H = H + ffn_forward(ops.layer_norm(H), block, self.config.activation, adapters, gates, noise)
        return ops.layer_norm(H) @ self.head


def build_supernetwork(
    config: ModelConfig,
    budget: int,
    rng: np.random.Generator,
    adapter_init: str = "lora",
    adapter_init_std: float = 0.02,
) -> SuperNetwork:
    """Random frozen base plus one adapter of rank budget / (6·layers) per block matrix."""
    n_modules = config.layers * N_MOD
    if budget < n_modules:
        raise ConfigurationError("allocator.R_target", f"budget {budget} is below the module count {n_modules}")
    if budget % n_modules:
        raise ConfigurationError("allocator.R_target", f"budget {budget} is not divisible by {n_modules} modules")
    rank = budget // n_modules
    d, d_ff = config.d, config.d_ff

    def frozen(shape, std=BASE_STD) -> Tensor:
        return Tensor(rng.normal(0.0, std, shape))

    embedding = frozen((config.vocab, d), 1.0)
    positions = frozen((config.max_seq_len, d), 1.0)
    blocks: List[BlockWeights] = []
    adapters: Dict[int, GatedLoraAdapter] = {}
    for layer in range(config.layers):
        block = BlockWeights(
            W_Q=frozen((d, d)), W_K=frozen((d, d)), W_V=frozen((d, d)), W_O=frozen((d, d)),
            W_U=frozen((d, d_ff)), W_D=frozen((d_ff, d)),
            b_U=Tensor(np.zeros(d_ff)), b_D=Tensor(np.zeros(d)),
            heads=config.heads,
            module_ids=tuple(module_id_for(layer, s) for s in SLOTS),
        )
        blocks.append(block)
        for slot in SLOTS:
            m = module_id_for(layer, slot)
            w = block.weight(slot)
            adapters[m] = GatedLoraAdapter(
                m, module_name_for(m), w.shape[0], w.shape[1], rank, rng,
                init=adapter_init, init_std=adapter_init_std,
            )
    head = frozen((d, config.vocab), 1.0 / math.sqrt(d))
    logger.info(f"[build] {config.layers} layers, {n_modules} adapters of rank {rank} (budget {budget})")
    return SuperNetwork(config, embedding, positions, blocks, head, adapters)


# ── Losses and decoding ───────────────────────────────────────────────────────

def _batch_arrays(batch) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    if isinstance(batch, np.ndarray):
        return batch, None
    return np.asarray(batch.tokens), getattr(batch, "loss_mask", None)


def lm_loss(
    model: SuperNetwork,
    batch,
    gates: Optional[GateOverride] = None,
    noise: Optional[np.random.Generator] = None,
    use_adapters: bool = True,
) -> Tensor:
    """
    Mean next-token cross-entropy. `batch` is a token array or any object
    with `tokens` and an optional boolean `loss_mask` marking the positions
    whose token must be predicted; without a mask every non-padding position
    after the first counts.
    """
    tokens, loss_mask = _batch_arrays(batch)
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.shape[0] == 0 or tokens.shape[1] < 2:
        raise ContractError("lm_loss needs a non-empty batch of sequences of length >= 2")
    targets = tokens[:, 1:]
    weights = (targets != 0) if loss_mask is None else np.asarray(loss_mask, dtype=bool).reshape(tokens.shape)[:, 1:]

    logits = model.forward(tokens[:, :-1], gates=gates, noise=noise, use_adapters=use_adapters)
    vocab = logits.shape[-1]
    return ops.cross_entropy_with_logits(
        ops.reshape(logits, (-1, vocab)), targets.reshape(-1), weights.reshape(-1)
    )


def greedy_decode(model: SuperNetwork, prompts: np.ndarray, steps: int) -> np.ndarray:
    """Append `steps` argmax tokens to every prompt; returns only the new tokens."""
    seq = np.asarray(prompts, dtype=np.int64)
    if seq.shape[1] + steps > model.config.max_seq_len + 1:
        raise DimensionError("greedy_decode", seq.shape, (model.config.max_seq_len,))
    generated = []
    with no_grad():
        for _ in range(steps):
            logits = model.forward(seq).data[:, -1, :]
            nxt = np.argmax(logits, axis=-1)
            generated.append(nxt)
            seq = np.concatenate([seq, nxt[:, None]], axis=1)
    return np.stack(generated, axis=1) if generated else np.zeros((seq.shape[0], 0), dtype=np.int64)
