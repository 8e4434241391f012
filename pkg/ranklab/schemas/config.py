# ranklab/schemas/config.py
"""
Run configuration. Every model rejects out-of-range values at construction,
so a bad config fails before any compute starts and the error names the
offending field.
"""
from typing import Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

N_MODULES_PER_BLOCK = 6


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ── Model ─────────────────────────────────────────────────────────────────────

class ModelConfig(_Section):
    layers: int = Field(2, ge=1)
    d: int = Field(64, ge=1)
    heads: int = Field(4, ge=1)
    d_ff: int = Field(256, ge=1)
    vocab: int = Field(32, ge=4)
    max_seq_len: int = Field(24, ge=2)
    activation: Literal["gelu", "relu"] = "gelu"

    @model_validator(mode="after")
    def heads_divide_width(self) -> "ModelConfig":
        if self.d % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide d ({self.d})")
        return self

    @property
    def n_modules(self) -> int:
        return self.layers * N_MODULES_PER_BLOCK


# ── Allocation ────────────────────────────────────────────────────────────────

class AllocatorConfig(_Section):
    R_target: int = Field(48, ge=1)
    K1: int = Field(3, ge=0)
    K2: int = Field(1, ge=0)
    N_A: int = Field(4, ge=0)
    r1: Optional[int] = Field(None, ge=1)
    val_batch_size: int = Field(64, ge=1)
    strategy: Literal["ablation", "dnas_baseline", "l0_baseline"] = "ablation"
    initial_ranks: Optional[int] = Field(None, ge=1)
    patience: int = Field(3, ge=1)
    dnas_split: float = Field(0.8, gt=0.0, lt=1.0)
    arch_lr: float = Field(3e-3, gt=0.0)
    record_importance: bool = True
    prune_every: int = Field(400, ge=1)
    prune_threshold: float = -1.0
    n_jobs: int = 1
    grow_init: Literal["random", "mean"] = "random"

    @field_validator("n_jobs")
    @classmethod
    def nonzero_jobs(cls, v: int) -> int:
        if v == 0:
            raise ValueError("n_jobs must be nonzero (-1 means all cores)")
        return v

    @model_validator(mode="after")
    def fill_defaults(self) -> "AllocatorConfig":
        if self.r1 is None:
            self.r1 = max(1, self.R_target // 16)
        if self.initial_ranks is None:
            self.initial_ranks = self.R_target
        if self.initial_ranks < self.R_target:
            raise ValueError(f"initial_ranks ({self.initial_ranks}) must be >= R_target ({self.R_target})")
        if self.N_A * self.r1 >= self.initial_ranks:
            raise ValueError(
                f"N_A·r1 = {self.N_A * self.r1} must stay below the starting rank count {self.initial_ranks}"
            )
        return self


# ── Gradient alignment / regularizers ─────────────────────────────────────────

class GAConfig(_Section):
    alpha: float = Field(0.5, ge=0.0, le=1.0)
    mode: Literal["soft", "hard", "off"] = "hard"
    epsilon_norm: float = Field(1e-12, gt=0.0)
    per_tensor: bool = False


class RegularizerConfig(_Section):
    orthogonal_weight: float = Field(0.1, ge=0.0)
    l0_weight: float = Field(1e-3, ge=0.0)
    tau: float = Field(2.0 / 3.0, gt=0.0)
    gamma_lower: float = Field(-0.1, lt=0.0)
    zeta_upper: float = Field(1.1, gt=1.0)
    log_theta_init: float = 2.0


# ── Optimization ──────────────────────────────────────────────────────────────

class OptimizerConfig(_Section):
    kind: Literal["sgd_momentum", "adaptive"] = "adaptive"
    lr: float = Field(1e-2, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-8, gt=0.0)
    weight_decay: float = Field(0.0, ge=0.0)
    warmup_fraction: float = Field(0.06, ge=0.0, lt=1.0)
    batch_size: int = Field(32, ge=1)
    adapter_init: Literal["lora", "normal"] = "lora"
    adapter_init_std: float = Field(0.02, gt=0.0)

    @field_validator("betas")
    @classmethod
    def betas_in_range(cls, v: Tuple[float, float]) -> Tuple[float, float]:
        if not all(0.0 <= b < 1.0 for b in v):
            raise ValueError(f"betas must lie in [0, 1), got {v}")
        return v


# ── Task ──────────────────────────────────────────────────────────────────────

TaskKind = Literal["copy", "reverse", "modular_add"]


def min_seq_len(kind: str) -> int:
    """Shortest sequence holding one input symbol (digit) per part plus separators."""
    return 5 if kind == "modular_add" else 3


class TaskSpec(_Section):
    kind: TaskKind = "copy"
    vocab: int = Field(32, ge=4)
    seq_len: int = Field(24, ge=3)
    train_size: int = Field(2048, ge=1)
    val_size: int = Field(256, ge=1)
    test_size: int = Field(256, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def long_enough(self) -> "TaskSpec":
        if self.seq_len < min_seq_len(self.kind):
            raise ValueError(f"seq_len {self.seq_len} is too short for {self.kind} (needs {min_seq_len(self.kind)})")
        return self


# ── Run ───────────────────────────────────────────────────────────────────────

class RunConfig(_Section):
    model: ModelConfig = Field(default_factory=ModelConfig)
    allocator: AllocatorConfig = Field(default_factory=AllocatorConfig)
    ga: GAConfig = Field(default_factory=GAConfig)
    regularizers: RegularizerConfig = Field(default_factory=RegularizerConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    task: TaskSpec = Field(default_factory=TaskSpec)
    precision: Literal["float32", "float64"] = "float32"
    seed: int = 0
    output_dir: Optional[str] = None

    @model_validator(mode="after")
    def sections_agree(self) -> "RunConfig":
        n = self.model.n_modules
        if self.allocator.initial_ranks % n:
            raise ValueError(
                f"allocator.initial_ranks ({self.allocator.initial_ranks}) must be a multiple of "
                f"the {n} adapted modules"
            )
        if self.task.vocab != self.model.vocab:
            raise ValueError(f"task.vocab ({self.task.vocab}) must equal model.vocab ({self.model.vocab})")
        if self.task.seq_len > self.model.max_seq_len:
            raise ValueError(
                f"task.seq_len ({self.task.seq_len}) exceeds model.max_seq_len ({self.model.max_seq_len})"
            )
        return self
