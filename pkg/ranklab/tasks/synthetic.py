# ranklab/tasks/synthetic.py
"""
Synthetic sequence tasks.

Token layout: PAD = 0, SEP = vocab − 1, content tokens 1..vocab − 2.
    copy         x SEP x
    reverse      x SEP reversed(x)
    modular_add  a SEP b SEP (a + b) mod B^k     (base B = vocab − 2, k digits each,
                                                  most significant digit first,
                                                  digit v written as token v + 1)
Loss is taken only on target positions. Splits are drawn from one seeded
stream and deduplicated, so train/val/test never share a sequence.
"""
import hashlib
import logging
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from core.errors import ConfigurationError
from schemas.config import TaskSpec, min_seq_len

logger = logging.getLogger("synthetic")

PAD = 0
_KINDS = ("copy", "reverse", "modular_add")
_MAX_DRAWS = 8


def sep_token(vocab: int) -> int:
    return vocab - 1


@dataclass
class Batch:
    tokens: np.ndarray     # (n, seq_len) int64
    loss_mask: np.ndarray  # (n, seq_len) bool, True where the token is a prediction target
    batch_id: str = ""

    def __len__(self) -> int:
        return self.tokens.shape[0]


@dataclass
class Split:
    name: str
    tokens: np.ndarray
    loss_mask: np.ndarray

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def batch(self, indices: np.ndarray) -> Batch:
        indices = np.asarray(indices, dtype=np.int64)
        digest = hashlib.sha1(indices.tobytes()).hexdigest()[:12]
        return Batch(self.tokens[indices], self.loss_mask[indices], f"{self.name}:{digest}")

    def full(self) -> Batch:
        return self.batch(np.arange(len(self)))

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        n = min(n, len(self))
        return self.batch(np.sort(rng.choice(len(self), size=n, replace=False)))

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator[Batch]:
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            yield self.batch(order[start:start + batch_size])

    def subset(self, indices: np.ndarray, name: str) -> "Split":
        return Split(name, self.tokens[indices], self.loss_mask[indices])


@dataclass
class Dataset:
    spec: TaskSpec
    train: Split
    val: Split
    test: Split
    prompt_len: int
    target_len: int

    def prompts(self, split: Split) -> np.ndarray:
        return split.tokens[:, :self.prompt_len]

    def targets(self, split: Split) -> np.ndarray:
        return split.tokens[:, self.prompt_len:self.prompt_len + self.target_len]


# ── Layout ────────────────────────────────────────────────────────────────────

def _digits(kind: str, seq_len: int) -> int:
    return (seq_len - 2) // 3 if kind == "modular_add" else (seq_len - 1) // 2


def target_for(kind: str, x: np.ndarray, vocab: int) -> np.ndarray:
    """Target tokens for input tokens x (rows); modular_add expects a‖b as 2k tokens."""
    x = np.asarray(x, dtype=np.int64)
    if kind == "copy":
        return x.copy()
    if kind == "reverse":
        return x[..., ::-1].copy()
    base = vocab - 2
    k = x.shape[-1] // 2
    place = base ** np.arange(k - 1, -1, -1, dtype=object)
    a = ((x[..., :k] - 1).astype(object) * place).sum(axis=-1)
    b = ((x[..., k:] - 1).astype(object) * place).sum(axis=-1)
    total = np.asarray((a + b) % (base ** k))
    out = np.empty(x.shape[:-1] + (k,), dtype=np.int64)
    for j in range(k - 1, -1, -1):
        out[..., j] = (total % base).astype(np.int64) + 1
        total = total // base
    return out


def _layout(kind: str, x: np.ndarray, vocab: int, seq_len: int):
    n = x.shape[0]
    sep = np.full((n, 1), sep_token(vocab), dtype=np.int64)
    y = target_for(kind, x, vocab)
    if kind == "modular_add":
        k = x.shape[1] // 2
        prompt = np.concatenate([x[:, :k], sep, x[:, k:], sep], axis=1)
    else:
        prompt = np.concatenate([x, sep], axis=1)
    seq = np.concatenate([prompt, y], axis=1)
    tokens = np.full((n, seq_len), PAD, dtype=np.int64)
    tokens[:, :seq.shape[1]] = seq
    mask = np.zeros((n, seq_len), dtype=bool)
    mask[:, prompt.shape[1]:seq.shape[1]] = True
    return tokens, mask, prompt.shape[1], y.shape[1]


# ── Generation ────────────────────────────────────────────────────────────────

def gen_task(spec: TaskSpec) -> Dataset:
    if spec.kind not in _KINDS:
        raise ConfigurationError("task.kind", f"unknown task {spec.kind!r}")
    if spec.seq_len < min_seq_len(spec.kind):
        raise ConfigurationError("task.seq_len", f"{spec.seq_len} is too short for {spec.kind}")

    k = _digits(spec.kind, spec.seq_len)
    width = 2 * k if spec.kind == "modular_add" else k
    base = spec.vocab - 2
    needed = spec.train_size + spec.val_size + spec.test_size
    if width * np.log(base) < np.log(needed):
        raise ConfigurationError(
            "task", f"only {base}^{width} distinct inputs exist, {needed} requested across splits"
        )

    rng = np.random.default_rng([spec.seed, _KINDS.index(spec.kind)])
    pool = np.zeros((0, width), dtype=np.int64)
    for _ in range(_MAX_DRAWS):
        draw = rng.integers(1, spec.vocab - 1, size=(needed, width), dtype=np.int64)
        merged = np.concatenate([pool, draw], axis=0)
        _, first = np.unique(merged, axis=0, return_index=True)
        pool = merged[np.sort(first)]
        if len(pool) >= needed:
            break
    if len(pool) < needed:
        raise ConfigurationError("task", f"could not draw {needed} distinct sequences")
    pool = pool[:needed]

    tokens, mask, prompt_len, target_len = _layout(spec.kind, pool, spec.vocab, spec.seq_len)
    cuts = np.cumsum([spec.train_size, spec.val_size])
    splits = [
        Split(name, t, m)
        for name, t, m in zip(
            ("train", "val", "test"), np.split(tokens, cuts), np.split(mask, cuts)
        )
    ]
    logger.info(
        f"[task] {spec.kind}: {spec.train_size}/{spec.val_size}/{spec.test_size} sequences, "
        f"prompt {prompt_len} + target {target_len} tokens"
    )
    return Dataset(spec, splits[0], splits[1], splits[2], prompt_len, target_len)
