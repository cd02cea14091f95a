"""
End-to-end recovery and ablation benchmark.

For every seed: train a teacher, score its layers, prune to `--keep` layers
and heal three variants:

    full        WLI pruning, dynamic distillation targets
    same_index  WLI pruning, each student layer aligned with its own teacher layer
    cosine      CLI pruning, dynamic distillation targets

Reports medians over seeds and checks recovery, speed-up, parameter
reduction, variant ordering and (with --check-determinism) byte-identical
reruns.

    python -m benchmarks.benchmark_ablation --config configs/acceptance.yaml --seeds 0 1 2
"""

import argparse
import hashlib
import statistics
from pathlib import Path

from src.compress import Criterion
from src.config import ExperimentConfig, PathsConfig, get_settings, load_config
from src.logger import setup_logger
from src.model import block_param_count
from src.pipeline import cmd_eval, cmd_gen_corpus, cmd_heal, cmd_importance, cmd_prune, cmd_train_teacher

MAX_TEACHER_TER = 0.02
MAX_TER_GAP = 0.03
MIN_SPEED_UP = 1.5
MAX_DATA_SHARE = 0.05
MIN_COSINE_MARGIN = 0.002

VARIANTS = ("full", "same_index", "cosine")


def seed_config(base: ExperimentConfig, seed: int, root: Path) -> ExperimentConfig:
    out = root / f"seed{seed}"
    paths = PathsConfig.under(out)
    data = base.model_dump()
    data.update(seed=seed, paths=paths.model_dump())
    data["model"]["seed"] = None
    data["task"]["train_seed"] = None
    data["task"]["eval_seed"] = None
    return ExperimentConfig.model_validate(data).resolved()


def run_seed(base: ExperimentConfig, seed: int, keep: int, root: Path, workers: int) -> dict:
    config = seed_config(base, seed, root)
    out = Path(config.paths.teacher_checkpoint).parent
    cmd_gen_corpus(config)
    cmd_train_teacher(config, workers=workers)
    cmd_importance(config, workers=workers)

    teacher, _ = cmd_eval(config, config.paths.teacher_checkpoint, label="teacher", workers=workers)
    results = {"teacher": teacher}

    for variant in VARIANTS:
        criterion: Criterion = "cli" if variant == "cosine" else "wli"
        target_mode = "same_index" if variant == "same_index" else "dynamic"
        student = str(out / f"student.{criterion}.ckpt")
        plan = str(out / f"student.{criterion}.plan.json")
        if f"pruned_{criterion}" not in results:
            pruned = config.model_copy(
                update={"paths": config.paths.model_copy(update={"student_checkpoint": student, "plan": plan})}
            )
            cmd_prune(pruned, [keep], criterion)
            results[f"pruned_{criterion}"], _ = cmd_eval(config, student, label=f"pruned_{criterion}", workers=workers)
        healed = str(out / f"healed.{variant}.ckpt")
        variant_config = config.model_copy(
            update={"distill": config.distill.model_copy(update={"target_mode": target_mode})}
        )
        cmd_heal(
            variant_config,
            student_path=student,
            plan_path=plan,
            out=healed,
            log_path=str(out / f"heal.{variant}.log.jsonl"),
            workers=workers,
        )
        results[variant], _ = cmd_eval(config, healed, label=variant, workers=workers)
    return results


def artifact_hashes(root: Path) -> dict[str, str]:
    """SHA-256 of every artifact except eval reports, which carry wall-clock throughput."""
    hashes = {}
    for path in sorted(root.rglob("*")):
        if path.is_file() and not path.name.endswith(".eval.json"):
            hashes[str(path.relative_to(root))] = hashlib.sha256(path.read_bytes()).hexdigest()
    return hashes


def check(name: str, ok: bool, detail: str) -> bool:
    print(f"  {'✓' if ok else '✗'} {name}: {detail}")
    return ok


def summarize(base: ExperimentConfig, runs: list[dict], keep: int) -> bool:
    def median(label: str, field: str) -> float:
        return statistics.median(getattr(run[label], field) for run in runs)

    print("\n📊 Medians over seeds:")
    print("-" * 60)
    for label in ("teacher", "pruned_wli", "pruned_cli", *VARIANTS):
        print(
            f"  {label:<12} TER {median(label, 'error_rate') * 100:6.2f}%  "
            f"{median(label, 'tokens_per_second'):8.1f} tok/s  depth {runs[0][label].depth}"
        )

    teacher_ter = median("teacher", "error_rate")
    full_ter = median("full", "error_rate")
    speed_up = statistics.median(r["full"].tokens_per_second / r["teacher"].tokens_per_second for r in runs)
    data = statistics.median(r["full"].heal_tokens / r["teacher"].train_tokens for r in runs)
    teacher, student = runs[0]["teacher"], runs[0]["full"]
    expected_drop = (base.model.n_layers - keep) * block_param_count(base.model)
    same_index_ter = median("same_index", "error_rate")
    cosine_ter = median("cosine", "error_rate")

    print("\n🔍 Checks:")
    results = [
        check("teacher quality", teacher_ter <= MAX_TEACHER_TER, f"TER {teacher_ter:.4f} <= {MAX_TEACHER_TER}"),
        check("recovery", full_ter <= teacher_ter + MAX_TER_GAP, f"healed {full_ter:.4f} vs teacher {teacher_ter:.4f}"),
        check("speed-up", speed_up >= MIN_SPEED_UP, f"{speed_up:.2f}x >= {MIN_SPEED_UP}x"),
        check("healing data", data <= MAX_DATA_SHARE, f"{data * 100:.2f}% of teacher tokens"),
        check(
            "parameter reduction",
            teacher.param_count - student.param_count == expected_drop,
            f"{teacher.param_count - student.param_count:,} removed, closed form {expected_drop:,}",
        ),
        check(
            "ablation ordering",
            full_ter <= same_index_ter <= cosine_ter and cosine_ter - full_ter >= MIN_COSINE_MARGIN,
            f"full {full_ter:.4f} <= same_index {same_index_ter:.4f} <= cosine {cosine_ter:.4f}",
        ),
    ]
    return all(results)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    parser.add_argument("--config")
    parser.add_argument("--set", dest="overrides", action="append", default=[])
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--keep", type=int, default=4)
    parser.add_argument("--out", help="Output root (default: <ARTIFACT_DIR>/ablation)")
    parser.add_argument("--check-determinism", action="store_true")
    args = parser.parse_args()

    settings = get_settings()
    setup_logger("layerprune", level=settings.log_level, log_format=settings.log_format)
    base = load_config(args.config, args.overrides)
    root = Path(args.out) if args.out else Path(settings.artifact_dir) / "ablation"

    print("🚀 layerprune recovery / ablation benchmark")
    print("=" * 60)
    runs = [run_seed(base, seed, args.keep, root, settings.workers) for seed in args.seeds]
    ok = summarize(base, runs, args.keep)

    if args.check_determinism:
        first = artifact_hashes(root / f"seed{args.seeds[0]}")
        rerun_root = root / "rerun"
        run_seed(base, args.seeds[0], args.keep, rerun_root, settings.workers)
        second = artifact_hashes(rerun_root / f"seed{args.seeds[0]}")
        differing = sorted(k for k in first if first[k] != second.get(k))
        same = not differing and first.keys() == second.keys()
        ok = check("determinism", same, f"{len(first)} artifacts, differing: {differing or 'none'}") and ok

    print("\n" + "=" * 60)
    print("✅ All checks passed" if ok else "❌ Some checks failed")
    return 0 if ok else 1


if __name__ == "__main__":
    raise SystemExit(main())
