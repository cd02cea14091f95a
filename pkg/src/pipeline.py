"""
Pipeline - One function per subcommand: corpus generation, teacher
training, importance scoring, pruning, healing, evaluation and reporting.

Each command reads its inputs from the experiment config's paths (or the
explicit overrides given), fails before doing any work when an input is
missing, and writes deterministic artifacts.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from src.checkpoint import load_checkpoint, model_hash, save_checkpoint
from src.compress import Criterion, copy_retained, identity_plan, load_plan, logit_gap, save_plan, select_prune_set
from src.config import ExperimentConfig
from src.distill import heal
from src.errors import NumericError
from src.importance import build_profile, read_profile, write_profile
from src.logger import get_logger, log_event
from src.metrics import corpus_error_rate, evaluate_model
from src.model import ModelParams, expected_param_count, init_params, param_bytes, param_count
from src.report import load_inputs, render, signed_percent_change, write_eval_report, write_report
from src.schemas import EvalReport, ImportanceProfile, PrunePlan
from src.taskgen import make_corpus, pad_batch, read_corpus, write_corpus
from src.train import TrainResult, train_teacher

logger = get_logger(__name__)

EQUIVALENCE_TOLERANCE = 1e-9
SELF_CHECK_SAMPLES = 4


def _path(value: Optional[str], default: str) -> Path:
    return Path(value if value is not None else default)


def eval_corpus_size(config: ExperimentConfig) -> int:
    return max(config.eval_samples, config.train.eval_samples, config.distill.eval_samples, config.throughput_prompts)


def cmd_gen_corpus(config: ExperimentConfig) -> tuple[Path, Path]:
    """Write the train and eval corpora; sample i of a split depends only on (split seed, i)."""
    train = make_corpus(config.task, config.train.n_train_samples, "train")
    evaluation = make_corpus(config.task, eval_corpus_size(config), "eval")
    return write_corpus(train, config.paths.train_corpus), write_corpus(evaluation, config.paths.eval_corpus)


def cmd_train_teacher(config: ExperimentConfig, workers: int = 1, out: Optional[str] = None) -> TrainResult:
    """Train a teacher from its seeded initialisation with plain cross-entropy."""
    # Both corpora are read before any training step runs.
    train = read_corpus(config.task, config.paths.train_corpus)
    evaluation = read_corpus(config.task, config.paths.eval_corpus)
    params = init_params(config.model)
    log_event(logger, "train_teacher.init", depth=config.model.n_layers, params=param_count(params))

    result = train_teacher(
        params,
        config.task,
        config.train,
        train.samples,
        order_seed=config.order_seed("teacher"),
        eval_samples=evaluation.samples,
        workers=workers,
        log_path=config.paths.train_log,
    )
    samples = evaluation.samples[: config.train.eval_samples]
    result.final_error_rate = corpus_error_rate(result.params, config.task, samples, workers=workers)
    meta = {
        "role": "teacher",
        "train_tokens": result.tokens_seen,
        "heal_tokens": 0,
        "eval_error_rate": result.final_error_rate,
        "eval_samples": len(samples),
    }
    save_checkpoint(result.params, _path(out, config.paths.teacher_checkpoint), meta)
    log_event(logger, "train_teacher.done", ter=result.final_error_rate, tokens=result.tokens_seen)
    return result


def cmd_importance(
    config: ExperimentConfig, checkpoint: Optional[str] = None, out: Optional[str] = None, workers: int = 1
) -> ImportanceProfile:
    params, _ = load_checkpoint(_path(checkpoint, config.paths.teacher_checkpoint))
    evaluation = read_corpus(config.task, config.paths.eval_corpus)
    assert config.task.eval_seed is not None
    profile = build_profile(
        params, config.task, evaluation.samples[: config.eval_samples], config.task.eval_seed, workers=workers
    )
    write_profile(profile, _path(out, config.paths.profile))
    return profile


PLAN_SUFFIX = ".plan.json"


def _with_keep(path: Path, keep: int) -> Path:
    # s.plan.json -> s.k3.plan.json, s.ckpt -> s.k3.ckpt, plan -> plan.k3
    suffix = PLAN_SUFFIX if path.name.endswith(PLAN_SUFFIX) else path.suffix
    base = path.name[: len(path.name) - len(suffix)] if suffix else path.name
    return path.with_name(f"{base}.k{keep}{suffix}")


def _variant_paths(config: ExperimentConfig, keep: int, many: bool) -> tuple[Path, Path]:
    student = Path(config.paths.student_checkpoint)
    plan = Path(config.paths.plan)
    if not many:
        return student, plan
    return _with_keep(student, keep), _with_keep(plan, keep)


@dataclass
class PruneOutcome:
    plan: PrunePlan
    checkpoint: Path
    plan_path: Path
    summary: str


def _prune_summary(teacher_params: int, teacher_bytes: int, depth: int, plan: PrunePlan, student: ModelParams) -> str:
    count, size = param_count(student), param_bytes(student)
    return (
        f"depth {depth} -> {plan.student_depth} ({signed_percent_change(depth, plan.student_depth)}), "
        f"params {teacher_params:,} -> {count:,} ({signed_percent_change(teacher_params, count)}), "
        f"bytes {teacher_bytes:,} -> {size:,} ({signed_percent_change(teacher_bytes, size)})"
    )


def cmd_prune(
    config: ExperimentConfig,
    keeps: Sequence[int],
    criterion: Criterion = "wli",
    checkpoint: Optional[str] = None,
    profile_path: Optional[str] = None,
) -> list[PruneOutcome]:
    """
    Build one student per requested depth from a single importance profile.

    With several depths, artifacts get a `.k<keep>` infix.
    """
    teacher, meta = load_checkpoint(_path(checkpoint, config.paths.teacher_checkpoint))
    profile = read_profile(_path(profile_path, config.paths.profile))
    depth = teacher.config.n_layers
    if profile.model_hash != model_hash(teacher):
        logger.warning("Profile was computed for a different checkpoint than the one being pruned")
    evaluation = read_corpus(config.task, config.paths.eval_corpus)
    check_tokens = pad_batch(config.task, evaluation.samples[:SELF_CHECK_SAMPLES], shift=False).inputs

    outcomes = []
    for keep in keeps:
        if keep == depth:
            logger.warning(f"keep={keep} equals the teacher depth; nothing is pruned")
            plan = identity_plan(depth)
        else:
            plan = select_prune_set(profile, keep, criterion)
        student = copy_retained(teacher, plan)

        gap = logit_gap(teacher, student, plan, check_tokens)
        if gap > EQUIVALENCE_TOLERANCE:
            raise NumericError(f"pruned student deviates from the teacher with skipped layers by {gap:.3e}")
        expected = expected_param_count(student.config)
        if param_count(student) != expected:
            raise NumericError(f"student has {param_count(student)} parameters, closed form gives {expected}")

        ckpt_path, plan_path = _variant_paths(config, keep, len(keeps) > 1)
        student_meta = {
            "role": "student",
            "train_tokens": int(meta.get("train_tokens", 0)),
            "heal_tokens": 0,
            "retained": plan.retained,
            "criterion": criterion,
        }
        save_checkpoint(student, ckpt_path, student_meta)
        save_plan(plan, plan_path)
        summary = _prune_summary(param_count(teacher), param_bytes(teacher), depth, plan, student)
        log_event(logger, "prune", keep=keep, criterion=criterion, retained=plan.retained, logit_gap=gap)
        outcomes.append(PruneOutcome(plan=plan, checkpoint=ckpt_path, plan_path=plan_path, summary=summary))
    return outcomes


def cmd_heal(
    config: ExperimentConfig,
    student_path: Optional[str] = None,
    teacher_path: Optional[str] = None,
    plan_path: Optional[str] = None,
    out: Optional[str] = None,
    log_path: Optional[str] = None,
    workers: int = 1,
) -> TrainResult:
    student, student_meta = load_checkpoint(_path(student_path, config.paths.student_checkpoint))
    teacher, _ = load_checkpoint(_path(teacher_path, config.paths.teacher_checkpoint))
    plan = load_plan(_path(plan_path, config.paths.plan))
    train = read_corpus(config.task, config.paths.train_corpus)
    evaluation = read_corpus(config.task, config.paths.eval_corpus)

    result = heal(
        student,
        teacher,
        plan,
        train.samples,
        config.task,
        config.distill,
        order_seed=config.order_seed("heal"),
        eval_samples=evaluation.samples,
        workers=workers,
        log_path=_path(log_path, config.paths.heal_log),
    )
    meta = {
        **student_meta,
        "role": "healed",
        "heal_tokens": int(student_meta.get("heal_tokens", 0)) + result.tokens_seen,
        "target_mode": config.distill.target_mode,
    }
    save_checkpoint(result.params, _path(out, config.paths.healed_checkpoint), meta)
    return result


def cmd_eval(
    config: ExperimentConfig,
    checkpoint: str,
    label: Optional[str] = None,
    out: Optional[str] = None,
    workers: int = 1,
) -> tuple[EvalReport, Path]:
    """TER, throughput and size of one checkpoint; writes `<report_dir>/<label>.eval.json`."""
    params, meta = load_checkpoint(checkpoint)
    evaluation = read_corpus(config.task, config.paths.eval_corpus)
    label = label or Path(checkpoint).stem
    report = evaluate_model(
        params,
        config.task,
        evaluation,
        label=label,
        n_samples=config.eval_samples,
        n_prompts=config.throughput_prompts,
        workers=workers,
        meta=meta,
    )
    path = write_eval_report(report, _path(out, str(Path(config.paths.report_dir) / f"{label}.eval.json")))
    return report, path


def cmd_report(config: ExperimentConfig, inputs: Sequence[str], out_dir: Optional[str] = None) -> str:
    """Render tables for the given eval/profile/log files and write plot data; returns the markdown."""
    loaded = load_inputs(inputs)
    write_report(loaded, _path(out_dir, config.paths.report_dir))
    return render(loaded)
