"""
Data models for layerprune - configuration blocks and pipeline records.
Every artifact written to disk is one of these pydantic models.
"""

from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

ERROR_METRIC_NAME = "TER (WER analog)"


class ModelConfig(BaseModel):
    """Architectural hyperparameters of the decoder-only transformer."""

    model_config = ConfigDict(extra="forbid")

    vocab_size: int = Field(68, ge=1, description="Content vocabulary plus reserved specials")
    d_model: int = Field(128, ge=1)
    n_heads: int = Field(4, ge=1)
    n_layers: int = Field(8, ge=1, description="Number of residual blocks")
    d_ff: int = Field(512, ge=1)
    max_seq_len: int = Field(128, ge=1)
    seed: Optional[int] = Field(None, description="Initialisation seed; derived from the global seed when unset")

    @model_validator(mode="after")
    def _heads_divide_width(self) -> "ModelConfig":
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


class TaskConfig(BaseModel):
    """Synthetic prompt-conditioned transduction task."""

    model_config = ConfigDict(extra="forbid")

    content_vocab: int = Field(64, ge=2)
    min_len: int = Field(8, ge=1, description="Shortest x segment")
    max_len: int = Field(16, ge=1, description="Longest x segment")
    n_speakers: int = Field(64, ge=2, description="Size of the cyclic-shift family")
    max_seq_len: int = Field(128, ge=1)
    include_prompt_loss: bool = Field(False, description="Also supervise the y1 region")
    train_seed: Optional[int] = None
    eval_seed: Optional[int] = None

    @model_validator(mode="after")
    def _check_ranges(self) -> "TaskConfig":
        if self.min_len > self.max_len:
            raise ValueError(f"min_len={self.min_len} exceeds max_len={self.max_len}")
        if self.n_speakers > self.content_vocab:
            raise ValueError("n_speakers cannot exceed content_vocab (shifts would repeat)")
        if self.train_seed is not None and self.train_seed == self.eval_seed:
            raise ValueError("train and eval splits must use different seeds")
        return self

    @property
    def pad_id(self) -> int:
        return self.content_vocab

    @property
    def bos_id(self) -> int:
        return self.content_vocab + 1

    @property
    def sep_id(self) -> int:
        return self.content_vocab + 2

    @property
    def eos_id(self) -> int:
        return self.content_vocab + 3

    @property
    def vocab_size(self) -> int:
        return self.content_vocab + 4

    @property
    def packed_max_len(self) -> int:
        return 4 * self.max_len + 5


class TrainConfig(BaseModel):
    """Plain cross-entropy pre-training of the teacher."""

    model_config = ConfigDict(extra="forbid")

    steps: int = Field(3000, ge=0)
    batch_size: int = Field(32, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    warmup_steps: int = Field(100, ge=0)
    grad_clip: float = Field(1.0, gt=0)
    log_every: int = Field(50, ge=1)
    eval_every: int = Field(500, ge=0, description="0 disables periodic evaluation")
    eval_samples: int = Field(64, ge=1)
    n_train_samples: int = Field(20000, ge=1)


class DistillConfig(BaseModel):
    """Healing stage: composite loss weights, switches and budget."""

    model_config = ConfigDict(extra="forbid")

    alpha: float = Field(0.25, ge=0.0, le=1.0, description="Weight on the supervised CE term")
    skew_lambda: float = Field(0.1, gt=0.0, le=1.0, description="Teacher share of the skew mixture")
    learning_rate: float = Field(5e-4, gt=0)
    batch_size: int = Field(32, ge=1)
    steps: int = Field(120, ge=0)
    grad_clip: float = Field(1.0, gt=0)
    log_every: int = Field(10, ge=1)
    eval_every: int = Field(40, ge=0)
    eval_samples: int = Field(64, ge=1)
    use_logit: bool = True
    use_latent: bool = True
    use_attention: bool = True
    use_embedding: bool = True
    target_mode: Literal["dynamic", "same_index"] = "dynamic"

    @property
    def distill_weight(self) -> float:
        return (1.0 - self.alpha) / 4.0


class Sample(BaseModel):
    """One (x1, y1, x2, y2) prompt pair with its packed token sequence."""

    x1: List[int]
    y1: List[int]
    x2: List[int]
    y2: List[int]
    speaker_id: int = Field(..., description="Hidden shift; diagnostics only, never fed to the model")
    packed: List[int] = Field(default_factory=list)
    loss_mask: List[bool] = Field(default_factory=list, description="True exactly on y2 positions")

    def segments(self) -> dict:
        return self.model_dump(include={"x1", "y1", "x2", "y2", "speaker_id"})


class Corpus(BaseModel):
    split: Literal["train", "eval"]
    seed: int
    samples: List[Sample]

    def __len__(self) -> int:
        return len(self.samples)


class PrunePlan(BaseModel):
    """Retained teacher layers and the teacher layer each student layer distils from."""

    teacher_depth: int
    retained: List[int]
    dropped: List[int]
    distill_target: List[int]

    @property
    def student_depth(self) -> int:
        return len(self.retained)


class LayerScore(BaseModel):
    layer_index: int
    wli: float
    cli: float
    wli_norm: float = 0.0
    cli_norm: float = 0.0


class ImportanceProfile(BaseModel):
    """Per-layer WLI and CLI scores of one model on one evaluation subset."""

    layers: List[LayerScore]
    base_error_rate: float
    model_hash: str
    eval_seed: int
    n_samples: int
    spearman: Optional[float] = None

    @property
    def depth(self) -> int:
        return len(self.layers)

    def scores(self, criterion: Literal["wli", "cli"]) -> List[float]:
        return [getattr(row, criterion) for row in self.layers]


class EvalReport(BaseModel):
    """Quality and efficiency of one model variant."""

    label: str
    metric: str = ERROR_METRIC_NAME
    error_rate: float = Field(..., ge=0.0)
    n_samples: int
    tokens_per_second: float
    param_count: int
    param_bytes: int
    depth: int
    peak_memory_bytes: int = 0
    train_tokens: int = 0
    heal_tokens: int = 0


class LossBreakdown(BaseModel):
    total: float
    ce: float
    logit: float = 0.0
    latent: float = 0.0
    attention: float = 0.0
    embedding: float = 0.0


class TrainLogRecord(BaseModel):
    """One logged training step; wall-clock timing is kept out so logs are reproducible."""

    phase: Literal["teacher", "heal"]
    step: int
    tokens_seen: int
    learning_rate: float
    losses: LossBreakdown
    eval_error_rate: Optional[float] = None
