"""
Distill - Healing a pruned student against its frozen teacher.

The objective mixes supervised cross-entropy with four alignment terms:

    total = alpha * ce + (1 - alpha) / 4 * (logit + latent + attention + embedding)

`logit` is a skew KL divergence between teacher and student next-token
distributions. `latent` and `attention` compare every student layer with
the teacher layer it stands in for (see compress.target_layers), and
`embedding` compares the embedded input streams. Teacher values are
constants: no gradient ever reaches the teacher.
"""

from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from src.compress import TargetMode, target_layers
from src.errors import NumericError, PlanError, PreconditionError, ShapeError
from src.logger import get_logger, log_event
from src.model import ForwardTrace, ModelParams, forward
from src.schemas import DistillConfig, LossBreakdown, PrunePlan, Sample, TaskConfig
from src.taskgen import Batch
from src.tensor import Tensor, as_tensor, cross_entropy, log, mul, no_grad, reduce_sum, softmax
from src.train import LoopConfig, Trainer, TrainResult

logger = get_logger(__name__)

DISTRIBUTION_TOLERANCE = 1e-8


def _check_distribution(x: np.ndarray, name: str) -> None:
    if x.ndim != 1 or x.size == 0:
        raise NumericError(f"{name} must be a non-empty vector, got shape {x.shape}")
    if not np.all(np.isfinite(x)) or np.any(x < 0):
        raise NumericError(f"{name} has negative or non-finite entries")
    if abs(float(x.sum()) - 1.0) > DISTRIBUTION_TOLERANCE:
        raise NumericError(f"{name} sums to {float(x.sum())!r}, not 1")


def _check_lambda(lam: float) -> None:
    if not 0.0 < lam <= 1.0:
        raise PreconditionError(f"skew lambda must lie in (0, 1], got {lam}")


def skew_kl(p: Sequence[float], q: Sequence[float], lam: float) -> float:
    """
    KL(p || lam*p + (1-lam)*q).

    Finite whenever lam > 0, even if q is zero where p is not.
    """
    p_arr = np.asarray(p, dtype=np.float64)
    q_arr = np.asarray(q, dtype=np.float64)
    _check_distribution(p_arr, "p")
    _check_distribution(q_arr, "q")
    if p_arr.shape != q_arr.shape:
        raise ShapeError(f"skew_kl: p {p_arr.shape} and q {q_arr.shape} differ")
    _check_lambda(lam)
    mixture = p_arr + (1.0 - lam) * (q_arr - p_arr)
    support = p_arr > 0
    return max(0.0, float(np.sum(p_arr[support] * np.log(p_arr[support] / mixture[support]))))


def _masked_mean(values: Tensor, mask: np.ndarray) -> Tensor:
    count = int(mask.sum())
    if count == 0:
        raise PreconditionError("loss mask selects no positions")
    return reduce_sum(values * mask.astype(np.float64)) / float(count)


def logit_loss(student_logits: Tensor, teacher_logits: np.ndarray, mask: np.ndarray, lam: float) -> Tensor:
    """Skew KL of teacher vs student next-token distributions, averaged over masked positions."""
    _check_lambda(lam)
    if student_logits.shape != teacher_logits.shape:
        raise ShapeError(f"logit_loss: student {student_logits.shape} vs teacher {teacher_logits.shape}")
    p = softmax(Tensor(teacher_logits)).values
    q = softmax(student_logits)
    support = p > 0
    log_p = np.log(np.where(support, p, 1.0))
    # Off the teacher's support the coefficient is zero; shift those entries away from log(0).
    mixture = (q - p) * (1.0 - lam) + (p + (~support).astype(np.float64))
    per_position = reduce_sum(mul(p, log_p - log(mixture)), axis=-1)
    return _masked_mean(per_position, np.asarray(mask, dtype=bool))


def _check_traces(student_trace: ForwardTrace, teacher_trace: ForwardTrace) -> None:
    if student_trace.tokens.shape != teacher_trace.tokens.shape:
        raise ShapeError(
            f"student and teacher traces have token shapes {student_trace.tokens.shape} and {teacher_trace.tokens.shape}"
        )
    if not np.array_equal(student_trace.tokens, teacher_trace.tokens):
        raise PreconditionError("student and teacher traces were run on different tokens")


def _resolve_targets(
    student_trace: ForwardTrace, teacher_trace: ForwardTrace, plan: PrunePlan, mode: TargetMode
) -> list[int]:
    _check_traces(student_trace, teacher_trace)
    if len(student_trace.executed) != plan.student_depth:
        raise PlanError(
            "depth-match", f"student trace has {len(student_trace.executed)} layers, plan retains {plan.student_depth}"
        )
    if len(teacher_trace.executed) != plan.teacher_depth:
        raise PlanError(
            "depth-match", f"teacher trace has {len(teacher_trace.executed)} layers, plan expects {plan.teacher_depth}"
        )
    return target_layers(plan, mode)


def _valid_mask(trace: ForwardTrace, valid: Optional[np.ndarray]) -> np.ndarray:
    if valid is None:
        return np.ones(trace.tokens.shape, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != trace.tokens.shape:
        raise ShapeError(f"valid mask {valid.shape} does not match tokens {trace.tokens.shape}")
    return valid


def _mse(student: Tensor, teacher: np.ndarray, mask: np.ndarray) -> tuple[Tensor, int]:
    """Sum of squared errors over masked elements, and the element count."""
    if student.shape != teacher.shape:
        raise ShapeError(f"student {student.shape} vs teacher {teacher.shape}")
    diff = student - teacher
    weights = np.broadcast_to(mask, student.shape).astype(np.float64)
    return reduce_sum(diff * diff * weights), int(weights.sum())


def latent_loss(
    student_trace: ForwardTrace,
    teacher_trace: ForwardTrace,
    plan: PrunePlan,
    mode: TargetMode = "dynamic",
    valid: Optional[np.ndarray] = None,
) -> Tensor:
    """Mean squared error between each student layer's output and its teacher target layer's output."""
    targets = _resolve_targets(student_trace, teacher_trace, plan, mode)
    mask = _valid_mask(student_trace, valid)[..., None]
    total: Tensor = as_tensor(0.0)
    count = 0
    for j, t in enumerate(targets):
        term, n = _mse(student_trace.layer_outputs[j], teacher_trace.output_of(t).values, mask)
        total = total + term
        count += n
    return total / float(max(count, 1))


def attention_mask(valid: np.ndarray) -> np.ndarray:
    """[..., T, T] pairs (query i, key k) with k <= i and both positions valid."""
    t = valid.shape[-1]
    causal = np.tril(np.ones((t, t), dtype=bool))
    return causal & valid[..., :, None] & valid[..., None, :]


def attention_loss(
    student_trace: ForwardTrace,
    teacher_trace: ForwardTrace,
    plan: PrunePlan,
    mode: TargetMode = "dynamic",
    valid: Optional[np.ndarray] = None,
) -> Tensor:
    """Mean squared error between head-averaged attention maps over causal, valid entries."""
    targets = _resolve_targets(student_trace, teacher_trace, plan, mode)
    mask = attention_mask(_valid_mask(student_trace, valid))
    total: Tensor = as_tensor(0.0)
    count = 0
    for j, t in enumerate(targets):
        student_attention = student_trace.attention_of(student_trace.executed[j])
        term, n = _mse(student_attention, teacher_trace.attention_of(t).values, mask)
        total = total + term
        count += n
    return total / float(max(count, 1))


def embedding_loss(
    student_trace: ForwardTrace, teacher_trace: ForwardTrace, valid: Optional[np.ndarray] = None
) -> Tensor:
    """Mean squared error between the embedded input streams (token plus position embeddings)."""
    _check_traces(student_trace, teacher_trace)
    mask = _valid_mask(student_trace, valid)[..., None]
    term, count = _mse(student_trace.embedded, teacher_trace.embedded.values, mask)
    return term / float(max(count, 1))


def composite_loss(
    student: ModelParams,
    teacher: ModelParams,
    batch: Batch,
    plan: PrunePlan,
    cfg: DistillConfig,
) -> tuple[LossBreakdown, Tensor]:
    """
    Run both models on `batch` and assemble the weighted objective.

    Returns:
        (per-term float breakdown, differentiable total)
    """
    if plan.teacher_depth != teacher.config.n_layers or plan.student_depth != student.config.n_layers:
        raise PlanError(
            "depth-match",
            f"plan {plan.teacher_depth}->{plan.student_depth} does not fit "
            f"teacher depth {teacher.config.n_layers} and student depth {student.config.n_layers}",
        )
    with no_grad():
        teacher_trace = forward(teacher, batch.inputs)
    student_trace = forward(student, batch.inputs)
    assert student_trace.logits is not None and teacher_trace.logits is not None

    ce = cross_entropy(student_trace.logits, batch.targets, batch.target_mask)
    terms: dict[str, Tensor] = {}
    if cfg.use_logit:
        terms["logit"] = logit_loss(student_trace.logits, teacher_trace.logits.values, batch.target_mask, cfg.skew_lambda)
    if cfg.use_latent:
        terms["latent"] = latent_loss(student_trace, teacher_trace, plan, cfg.target_mode, batch.valid)
    if cfg.use_attention:
        terms["attention"] = attention_loss(student_trace, teacher_trace, plan, cfg.target_mode, batch.valid)
    if cfg.use_embedding:
        terms["embedding"] = embedding_loss(student_trace, teacher_trace, batch.valid)

    total = ce * cfg.alpha
    if terms:
        distill_sum = sum(terms.values(), as_tensor(0.0))
        total = total + distill_sum * cfg.distill_weight
    breakdown = LossBreakdown(total=total.item(), ce=ce.item(), **{name: term.item() for name, term in terms.items()})
    return breakdown, total


def heal(
    student: ModelParams,
    teacher: ModelParams,
    plan: PrunePlan,
    samples: Sequence[Sample],
    task: TaskConfig,
    cfg: DistillConfig,
    order_seed: int,
    eval_samples: Sequence[Sample] = (),
    workers: int = 1,
    log_path: Optional[Union[str, Path]] = None,
) -> TrainResult:
    """
    Distil `teacher` into a copy of `student` for `cfg.steps` steps with fresh Adam state.

    Neither input model is modified.
    """
    if plan.student_depth != student.config.n_layers:
        raise PlanError("depth-match", f"student has {student.config.n_layers} layers, plan retains {plan.student_depth}")
    log_event(
        logger,
        "heal.config",
        alpha=cfg.alpha,
        skew_lambda=cfg.skew_lambda,
        target_mode=cfg.target_mode,
        terms=",".join(t for t in ("logit", "latent", "attention", "embedding") if getattr(cfg, f"use_{t}")) or "none",
    )

    def loss_fn(params: ModelParams, batch: Batch) -> tuple[LossBreakdown, Tensor]:
        return composite_loss(params, teacher, batch, plan, cfg)

    loop = LoopConfig(
        phase="heal",
        steps=cfg.steps,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        grad_clip=cfg.grad_clip,
        log_every=cfg.log_every,
        eval_every=cfg.eval_every,
        eval_samples=cfg.eval_samples,
    )
    trainer = Trainer(loop, task, loss_fn, order_seed, eval_samples=eval_samples, workers=workers, log_path=log_path)
    return trainer.run(student, samples)
