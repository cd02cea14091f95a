"""
Report - Comparison tables and plot data from eval reports, importance
profiles and training logs.

The first eval report given is the baseline (normally the teacher); every
other report gets a relative row against it.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

from pydantic import ValidationError

from src.errors import PreconditionError, ReportParseError
from src.importance import read_profile
from src.logger import get_logger
from src.schemas import EvalReport, ImportanceProfile, TrainLogRecord
from src.train import read_train_log

logger = get_logger(__name__)

ABSOLUTE_HEADER = ["Model", "Layers", "Params", "Param MB", "TER (%)", "Tokens/s", "Peak MB"]
DELTA_HEADER = ["Model", "Layers", "Params", "RTF analog", "Speed-up", "TER Δ (pts)", "Data"]
CURVE_COLUMNS = [
    "step",
    "tokens_seen",
    "learning_rate",
    "total",
    "ce",
    "logit",
    "latent",
    "attention",
    "embedding",
    "eval_ter",
]


@dataclass
class ReportInputs:
    evals: list[EvalReport] = field(default_factory=list)
    profiles: list[tuple[Path, ImportanceProfile]] = field(default_factory=list)
    logs: list[tuple[Path, list[TrainLogRecord]]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.evals) + len(self.profiles) + len(self.logs)


def read_eval_report(path: Union[str, Path]) -> EvalReport:
    path = Path(path)
    if not path.exists():
        raise ReportParseError(str(path), 0, "report file not found")
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ReportParseError(str(path), e.lineno, e.msg) from e
    try:
        return EvalReport.model_validate(data)
    except ValidationError as e:
        raise ReportParseError(str(path), 1, f"not an eval report: {e.errors()[0]['msg']}") from e


def write_eval_report(report: EvalReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


def load_inputs(paths: Sequence[Union[str, Path]]) -> ReportInputs:
    """Dispatch on suffix: .csv profiles, .jsonl training logs, .json eval reports."""
    if not paths:
        raise PreconditionError("report needs at least one input file")
    inputs = ReportInputs()
    for raw in paths:
        path = Path(raw)
        if path.suffix == ".csv":
            inputs.profiles.append((path, read_profile(path)))
        elif path.suffix == ".jsonl":
            inputs.logs.append((path, read_train_log(path)))
        elif path.suffix == ".json":
            inputs.evals.append(read_eval_report(path))
        else:
            raise ReportParseError(str(path), 0, f"unrecognised report input type '{path.suffix}'")
    return inputs


# Formatting


def signed_percent_change(before: float, after: float) -> str:
    """Relative change rendered with an arrow, e.g. ↓50.0%."""
    if before == 0:
        return "n/a"
    change = (after - before) / before * 100.0
    if round(change, 1) == 0:
        return "0.0%"
    return f"{'↓' if change < 0 else '↑'}{abs(change):.1f}%"


def speed_up(baseline_tps: float, tps: float) -> str:
    return "n/a" if baseline_tps <= 0 else f"{tps / baseline_tps:.2f}×"


def rtf_change(baseline_tps: float, tps: float) -> str:
    """RTF is proportional to time per token, i.e. 1 / throughput."""
    if baseline_tps <= 0 or tps <= 0:
        return "n/a"
    return signed_percent_change(1.0 / baseline_tps, 1.0 / tps)


def ter_delta(baseline: EvalReport, report: EvalReport) -> str:
    return f"{(report.error_rate - baseline.error_rate) * 100.0:+.2f}"


def data_share(baseline: EvalReport, report: EvalReport) -> str:
    """Healing tokens as a share of the baseline's training tokens."""
    if baseline.train_tokens <= 0:
        return "n/a"
    return f"{report.heal_tokens / baseline.train_tokens * 100.0:.1f}%"


def _markdown(header: list[str], rows: list[list[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(row) + " |" for row in rows]
    return "\n".join(lines)


def absolute_table(reports: Sequence[EvalReport]) -> str:
    rows = [
        [
            r.label,
            str(r.depth),
            f"{r.param_count:,}",
            f"{r.param_bytes / 1e6:.2f}",
            f"{r.error_rate * 100.0:.2f}",
            f"{r.tokens_per_second:.1f}",
            f"{r.peak_memory_bytes / 1e6:.2f}",
        ]
        for r in reports
    ]
    return _markdown(ABSOLUTE_HEADER, rows)


def delta_table(baseline: EvalReport, reports: Sequence[EvalReport]) -> str:
    rows = [
        [
            r.label,
            signed_percent_change(baseline.depth, r.depth),
            signed_percent_change(baseline.param_count, r.param_count),
            rtf_change(baseline.tokens_per_second, r.tokens_per_second),
            speed_up(baseline.tokens_per_second, r.tokens_per_second),
            ter_delta(baseline, r),
            data_share(baseline, r),
        ]
        for r in reports
    ]
    return _markdown(DELTA_HEADER, rows)


def importance_table(profile: ImportanceProfile) -> str:
    rows = [
        [str(s.layer_index), f"{s.wli * 100.0:.2f}", f"{s.cli:.4f}", f"{s.wli_norm:.3f}", f"{s.cli_norm:.3f}"]
        for s in profile.layers
    ]
    table = _markdown(["Layer", "WLI (TER %)", "CLI", "WLI norm", "CLI norm"], rows)
    rho = "n/a" if profile.spearman is None else f"{profile.spearman:.3f}"
    return f"{table}\n\nBase TER {profile.base_error_rate * 100.0:.2f}%, Spearman(WLI, CLI) = {rho}"


def importance_plot_csv(profile: ImportanceProfile) -> str:
    lines = ["layer_index,wli,cli,wli_norm,cli_norm"]
    lines += [f"{s.layer_index},{s.wli!r},{s.cli!r},{s.wli_norm!r},{s.cli_norm!r}" for s in profile.layers]
    return "\n".join(lines) + "\n"


def loss_curve_csv(records: Sequence[TrainLogRecord]) -> str:
    lines = [",".join(CURVE_COLUMNS)]
    for r in records:
        terms = r.losses.model_dump(include={"total", "ce", "logit", "latent", "attention", "embedding"})
        values = [r.step, r.tokens_seen, r.learning_rate, *(terms[name] for name in CURVE_COLUMNS[3:9])]
        ter = "" if r.eval_error_rate is None else repr(r.eval_error_rate)
        lines.append(",".join(repr(v) for v in values) + f",{ter}")
    return "\n".join(lines) + "\n"


def render(inputs: ReportInputs) -> str:
    """Markdown document with every table the inputs support."""
    sections = []
    if inputs.evals:
        sections.append("## Absolute\n\n" + absolute_table(inputs.evals))
        if len(inputs.evals) > 1:
            baseline = inputs.evals[0]
            sections.append(f"## Relative to {baseline.label}\n\n" + delta_table(baseline, inputs.evals[1:]))
    for path, profile in inputs.profiles:
        sections.append(f"## Layer importance ({path.name})\n\n" + importance_table(profile))
    for path, records in inputs.logs:
        if records:
            last = records[-1]
            sections.append(
                f"## Training log ({path.name})\n\n"
                f"{len(records)} records, final step {last.step}, tokens {last.tokens_seen:,}, "
                f"final loss {last.losses.total:.4f}"
            )
    return "\n\n".join(sections) + "\n"


def write_report(inputs: ReportInputs, out_dir: Union[str, Path]) -> list[Path]:
    """Write report.md plus plot-data CSVs next to it; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "report.md"]
    written[0].write_text(render(inputs), encoding="utf-8")
    for path, profile in inputs.profiles:
        target = out / f"{path.stem}.importance.csv"
        target.write_text(importance_plot_csv(profile), encoding="utf-8")
        written.append(target)
    for path, records in inputs.logs:
        target = out / f"{Path(path.stem).stem}.curve.csv"
        target.write_text(loss_curve_csv(records), encoding="utf-8")
        written.append(target)
    logger.info(f"Wrote {len(written)} report files to {out}")
    return written
