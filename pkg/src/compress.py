"""
Compress - Choose which layers survive, copy them into a shallower student,
and record which teacher layer each student layer distils from.
"""

from pathlib import Path
from typing import Literal, Union

import numpy as np
from pydantic import ValidationError

from src.errors import ConfigError, PlanError, PreconditionError
from src.logger import get_logger
from src.model import ModelParams, forward
from src.schemas import ImportanceProfile, PrunePlan
from src.tensor import no_grad

logger = get_logger(__name__)

Criterion = Literal["wli", "cli"]
TargetMode = Literal["dynamic", "same_index"]


def distill_targets(retained: list[int], teacher_depth: int) -> list[int]:
    """
    Teacher target for each student layer: the last teacher layer before the
    next retained one, and the teacher's final layer for the last student layer.
    """
    targets = [nxt - 1 for nxt in retained[1:]]
    if retained:
        targets.append(teacher_depth - 1)
    return targets


def make_plan(teacher_depth: int, retained: list[int]) -> PrunePlan:
    kept = sorted(retained)
    plan = PrunePlan(
        teacher_depth=teacher_depth,
        retained=kept,
        dropped=[i for i in range(teacher_depth) if i not in set(kept)],
        distill_target=distill_targets(kept, teacher_depth),
    )
    validate_plan(plan)
    return plan


def identity_plan(teacher_depth: int) -> PrunePlan:
    return make_plan(teacher_depth, list(range(teacher_depth)))


def select_prune_set(profile: ImportanceProfile, keep: int, criterion: Criterion = "wli") -> PrunePlan:
    """
    Retain the `keep` highest-scoring layers under `criterion`.

    Ties favour the lower layer index.
    """
    depth = profile.depth
    if not 1 <= keep < depth:
        raise PreconditionError(f"keep must lie in [1, {depth}), got {keep}")
    scores = profile.scores(criterion)
    ranked = sorted(range(depth), key=lambda i: (-scores[i], i))
    plan = make_plan(depth, ranked[:keep])
    logger.info(f"Prune plan ({criterion}): retained={plan.retained} dropped={plan.dropped}")
    return plan


def validate_plan(plan: PrunePlan) -> None:
    """Raise PlanError naming the first violated invariant."""
    depth = plan.teacher_depth
    if depth < 1:
        raise PlanError("depth", f"teacher depth must be positive, got {depth}")
    if not plan.retained:
        raise PlanError("non-empty", "at least one layer must be retained")
    if any(b <= a for a, b in zip(plan.retained, plan.retained[1:])):
        raise PlanError("sorted", f"retained must be strictly ascending, got {plan.retained}")
    if sorted(plan.retained + plan.dropped) != list(range(depth)):
        raise PlanError("partition", f"retained {plan.retained} and dropped {plan.dropped} do not partition [0, {depth})")
    if len(plan.distill_target) != len(plan.retained):
        raise PlanError("target-length", "one distillation target per retained layer is required")
    if plan.distill_target[-1] != depth - 1:
        raise PlanError("final-target", f"last student layer must target teacher layer {depth - 1}")
    expected = distill_targets(plan.retained, depth)
    for j, (got, want) in enumerate(zip(plan.distill_target, expected)):
        if got != want:
            raise PlanError("target-rule", f"student layer {j} targets {got}, expected {want}")


def target_layers(plan: PrunePlan, mode: TargetMode) -> list[int]:
    """Teacher layer per student layer for latent/attention alignment."""
    if mode == "dynamic":
        return list(plan.distill_target)
    if mode == "same_index":
        return list(plan.retained)
    raise PreconditionError(f"unknown target mode '{mode}'")


def copy_retained(teacher: ModelParams, plan: PrunePlan) -> ModelParams:
    """Build the student: retained blocks, embeddings, final norm and head copied verbatim."""
    if plan.teacher_depth != teacher.config.n_layers:
        raise PlanError(
            "depth-match", f"plan is for depth {plan.teacher_depth}, teacher has {teacher.config.n_layers}"
        )
    validate_plan(plan)
    student = teacher.clone()
    student.layers = [student.layers[i] for i in plan.retained]
    student.config = teacher.config.model_copy(update={"n_layers": len(plan.retained)})
    return student


def logit_gap(teacher: ModelParams, student: ModelParams, plan: PrunePlan, tokens: np.ndarray) -> float:
    """Largest |logit| difference between the student and the teacher run with the dropped layers skipped."""
    with no_grad():
        expected = forward(teacher, tokens, skip=set(plan.dropped)).logits
        actual = forward(student, tokens).logits
    assert expected is not None and actual is not None
    return float(np.max(np.abs(expected.values - actual.values)))


def save_plan(plan: PrunePlan, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(plan.model_dump_json() + "\n", encoding="utf-8")
    return path


def load_plan(path: Union[str, Path]) -> PrunePlan:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"plan file not found: {path}")
    try:
        plan = PrunePlan.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise ConfigError(f"{path}: {e}") from e
    validate_plan(plan)
    return plan
