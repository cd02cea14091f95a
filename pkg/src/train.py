"""
Trainer - Minibatch optimisation loop shared by teacher pre-training and
post-prune healing.

The loop owns batching, the learning-rate schedule, gradient clipping, Adam,
divergence checks, periodic evaluation and the JSON-lines training log. What
is minimised is supplied as a loss function over a padded batch.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Literal, Optional, Sequence, Union

import numpy as np
from pydantic import ValidationError

from src.errors import PreconditionError, ReportParseError, TrainingDivergedError
from src.logger import get_logger, log_event
from src.metrics import MetricsCollector, Timer, corpus_error_rate
from src.model import ModelParams, forward
from src.schemas import LossBreakdown, Sample, TaskConfig, TrainConfig, TrainLogRecord
from src.taskgen import Batch, pad_batch
from src.tensor import OptimizerState, Tensor, adam_step, backward, cross_entropy

logger = get_logger(__name__)

LossFn = Callable[[ModelParams, Batch], tuple[LossBreakdown, Tensor]]

LOSS_TERMS = ("ce", "logit", "latent", "attention", "embedding")


@dataclass
class LoopConfig:
    """Budget and optimiser settings common to TrainConfig and DistillConfig."""

    phase: Literal["teacher", "heal"]
    steps: int
    batch_size: int
    learning_rate: float
    grad_clip: float
    log_every: int
    eval_every: int
    eval_samples: int
    warmup_steps: int = 0

    @classmethod
    def from_train(cls, cfg: TrainConfig) -> "LoopConfig":
        return cls(
            phase="teacher",
            steps=cfg.steps,
            batch_size=cfg.batch_size,
            learning_rate=cfg.learning_rate,
            grad_clip=cfg.grad_clip,
            log_every=cfg.log_every,
            eval_every=cfg.eval_every,
            eval_samples=cfg.eval_samples,
            warmup_steps=cfg.warmup_steps,
        )


@dataclass
class TrainResult:
    params: ModelParams
    records: list[TrainLogRecord] = field(default_factory=list)
    tokens_seen: int = 0
    final_error_rate: Optional[float] = None


def learning_rate_at(step: int, base: float, warmup_steps: int) -> float:
    """Linear warmup over the first `warmup_steps` steps (1-based), then constant."""
    if warmup_steps <= 0 or step > warmup_steps:
        return base
    return base * step / warmup_steps


def clip_gradients(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most `max_norm`; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def batch_indices(n_samples: int, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """Endless stream of index batches: one seeded permutation per epoch, ragged tail dropped."""
    if n_samples < 1:
        raise PreconditionError("training corpus is empty")
    rng = np.random.default_rng(seed)
    size = min(batch_size, n_samples)
    while True:
        order = rng.permutation(n_samples)
        for start in range(0, n_samples - size + 1, size):
            yield order[start : start + size]


def check_finite(step: int, losses: LossBreakdown) -> None:
    for term in (*LOSS_TERMS, "total"):
        value = getattr(losses, term)
        if not math.isfinite(value):
            logger.error(f"Loss term '{term}' is {value} at step {step}")
            raise TrainingDivergedError(step, term, value)


def cross_entropy_loss(params: ModelParams, batch: Batch) -> tuple[LossBreakdown, Tensor]:
    """Plain next-token CE over the batch's target mask (teacher pre-training)."""
    trace = forward(params, batch.inputs)
    assert trace.logits is not None
    ce = cross_entropy(trace.logits, batch.targets, batch.target_mask)
    value = ce.item()
    return LossBreakdown(total=value, ce=value), ce


class Trainer:
    """
    Runs `loop.steps` optimisation steps of `loss_fn` on a copy of the
    supplied parameters. The input model is never modified.
    """

    def __init__(
        self,
        loop: LoopConfig,
        task: TaskConfig,
        loss_fn: LossFn,
        order_seed: int,
        eval_samples: Sequence[Sample] = (),
        workers: int = 1,
        log_path: Optional[Union[str, Path]] = None,
    ):
        self.loop = loop
        self.task = task
        self.loss_fn = loss_fn
        self.order_seed = order_seed
        self.eval_samples = list(eval_samples)[: loop.eval_samples]
        self.workers = workers
        self.log_path = Path(log_path) if log_path is not None else None
        self.metrics = MetricsCollector()

    def run(self, params: ModelParams, samples: Sequence[Sample]) -> TrainResult:
        result = TrainResult(params=params.clone())
        if self.loop.steps == 0:
            logger.info(f"{self.loop.phase}: zero-step budget, parameters unchanged")
            self._write_log(result.records)
            return result

        model = result.params
        state = OptimizerState(learning_rate=self.loop.learning_rate)
        batches = batch_indices(len(samples), self.loop.batch_size, self.order_seed)
        log_event(
            logger,
            f"{self.loop.phase}.start",
            steps=self.loop.steps,
            batch_size=self.loop.batch_size,
            samples=len(samples),
            params=sum(p.size for p in model.parameters()),
        )

        for step in range(1, self.loop.steps + 1):
            batch = pad_batch(self.task, [samples[i] for i in next(batches)])
            with Timer() as timer:
                losses, total = self.loss_fn(model, batch)
                check_finite(step, losses)
                backward(total)
                grad_norm = clip_gradients(model.parameters(), self.loop.grad_clip)
                state.learning_rate = learning_rate_at(step, self.loop.learning_rate, self.loop.warmup_steps)
                adam_step(model.parameters(), state)
            self.metrics.record_step(timer.elapsed_ms, batch.n_tokens)
            result.tokens_seen += batch.n_tokens

            eval_rate = None
            if self.eval_samples and self.loop.eval_every and step % self.loop.eval_every == 0:
                eval_rate = corpus_error_rate(model, self.task, self.eval_samples, workers=self.workers)
                result.final_error_rate = eval_rate

            if step % self.loop.log_every == 0 or step == self.loop.steps or eval_rate is not None:
                record = TrainLogRecord(
                    phase=self.loop.phase,
                    step=step,
                    tokens_seen=result.tokens_seen,
                    learning_rate=state.learning_rate,
                    losses=losses,
                    eval_error_rate=eval_rate,
                )
                result.records.append(record)
                self._log_step(record, grad_norm)

        self._write_log(result.records)
        stats = self.metrics.get_step_stats()
        log_event(
            logger,
            f"{self.loop.phase}.done",
            steps=stats["count"],
            tokens=result.tokens_seen,
            avg_step_ms=stats["avg_latency_ms"],
        )
        return result

    def _log_step(self, record: TrainLogRecord, grad_norm: float) -> None:
        fields = {name: getattr(record.losses, name) for name in ("total", *LOSS_TERMS)}
        if record.eval_error_rate is not None:
            fields["ter"] = record.eval_error_rate
        log_event(
            logger,
            f"{self.loop.phase}.step",
            step=record.step,
            lr=record.learning_rate,
            grad_norm=grad_norm,
            step_ms=self.metrics.get_step_stats()["avg_latency_ms"],
            **fields,
        )

    def _write_log(self, records: list[TrainLogRecord]) -> None:
        if self.log_path is None:
            return
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        with self.log_path.open("w", encoding="utf-8") as f:
            for record in records:
                f.write(record.model_dump_json() + "\n")


def train_teacher(
    params: ModelParams,
    task: TaskConfig,
    cfg: TrainConfig,
    samples: Sequence[Sample],
    order_seed: int,
    eval_samples: Sequence[Sample] = (),
    workers: int = 1,
    log_path: Optional[Union[str, Path]] = None,
) -> TrainResult:
    """Pre-train from the given initialisation with cross-entropy only."""
    trainer = Trainer(
        LoopConfig.from_train(cfg),
        task,
        cross_entropy_loss,
        order_seed,
        eval_samples=eval_samples,
        workers=workers,
        log_path=log_path,
    )
    return trainer.run(params, samples)


def read_train_log(path: Union[str, Path]) -> list[TrainLogRecord]:
    path = Path(path)
    if not path.exists():
        raise ReportParseError(str(path), 0, "training log not found")
    records = []
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(TrainLogRecord.model_validate_json(line))
        except ValidationError as e:
            raise ReportParseError(str(path), number, f"bad training log record: {e.errors()[0]['msg']}") from e
    return records
