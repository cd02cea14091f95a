"""Tests for report tables and plot data."""

import pytest

from src.errors import PreconditionError, ReportParseError
from src.importance import write_profile
from src.report import (
    DELTA_HEADER,
    ReportInputs,
    absolute_table,
    delta_table,
    importance_table,
    load_inputs,
    loss_curve_csv,
    read_eval_report,
    render,
    rtf_change,
    signed_percent_change,
    speed_up,
    write_eval_report,
    write_report,
)
from src.schemas import EvalReport, ImportanceProfile, LayerScore, LossBreakdown, TrainLogRecord


@pytest.fixture
def teacher_report():
    return EvalReport(
        label="teacher",
        error_rate=0.01,
        n_samples=128,
        tokens_per_second=100.0,
        param_count=1000,
        param_bytes=8000,
        depth=8,
        train_tokens=1000,
    )


@pytest.fixture
def healed_report():
    return EvalReport(
        label="healed",
        error_rate=0.02,
        n_samples=128,
        tokens_per_second=200.0,
        param_count=500,
        param_bytes=4000,
        depth=4,
        train_tokens=1000,
        heal_tokens=20,
    )


@pytest.fixture
def profile():
    return ImportanceProfile(
        layers=[
            LayerScore(layer_index=0, wli=0.5, cli=0.2, wli_norm=1.0, cli_norm=1.0),
            LayerScore(layer_index=1, wli=0.1, cli=0.1, wli_norm=0.0, cli_norm=0.0),
        ],
        base_error_rate=0.01,
        model_hash="f" * 64,
        eval_seed=2,
        n_samples=16,
    )


@pytest.fixture
def records():
    return [
        TrainLogRecord(phase="heal", step=1, tokens_seen=10, learning_rate=5e-4, losses=LossBreakdown(total=2.0, ce=3.0)),
        TrainLogRecord(
            phase="heal",
            step=2,
            tokens_seen=20,
            learning_rate=5e-4,
            losses=LossBreakdown(total=1.0, ce=2.0),
            eval_error_rate=0.25,
        ),
    ]


def test_signed_percent_change():
    """Test arrow rendering of relative changes."""
    assert signed_percent_change(8, 4) == "↓50.0%"
    assert signed_percent_change(4, 5) == "↑25.0%"
    assert signed_percent_change(10, 10) == "0.0%"
    assert signed_percent_change(0, 3) == "n/a"


def test_speed_and_rtf():
    assert speed_up(100.0, 174.0) == "1.74×"
    assert rtf_change(100.0, 200.0) == "↓50.0%"
    assert rtf_change(0.0, 200.0) == "n/a"


def test_delta_table_for_halved_model(teacher_report, healed_report):
    """Test the relative row of a model with half the layers and twice the speed."""
    table = delta_table(teacher_report, [healed_report])
    header, _, row = table.splitlines()

    assert header == "| " + " | ".join(DELTA_HEADER) + " |"
    assert row == "| healed | ↓50.0% | ↓50.0% | ↓50.0% | 2.00× | +1.00 | 2.0% |"


def test_absolute_table(teacher_report):
    row = absolute_table([teacher_report]).splitlines()[2]

    assert row == "| teacher | 8 | 1,000 | 0.01 | 1.00 | 100.0 | 0.00 |"


def test_render_single_report_has_no_delta_table(teacher_report):
    text = render(ReportInputs(evals=[teacher_report]))

    assert "## Absolute" in text
    assert "Relative to" not in text


def test_render_uses_first_report_as_baseline(teacher_report, healed_report):
    text = render(ReportInputs(evals=[teacher_report, healed_report]))

    assert "## Relative to teacher" in text
    assert "| healed | ↓50.0%" in text


def test_importance_table(profile):
    text = importance_table(profile)

    assert "| 0 | 50.00 | 0.2000 | 1.000 | 1.000 |" in text
    assert "Spearman(WLI, CLI) = n/a" in text


def test_loss_curve_csv(records):
    lines = loss_curve_csv(records).splitlines()

    assert lines[0] == "step,tokens_seen,learning_rate,total,ce,logit,latent,attention,embedding,eval_ter"
    assert lines[1] == "1,10,0.0005,2.0,3.0,0.0,0.0,0.0,0.0,"
    assert lines[2].endswith(",0.25")


def test_eval_report_file_roundtrip(teacher_report, tmp_path):
    path = write_eval_report(teacher_report, tmp_path / "reports" / "teacher.eval.json")

    assert read_eval_report(path) == teacher_report


def test_read_eval_report_parse_error_line(tmp_path):
    """Test malformed JSON is reported at the offending line."""
    path = tmp_path / "broken.eval.json"
    path.write_text('{\n"label": "x",\n oops\n}\n')

    with pytest.raises(ReportParseError) as exc:
        read_eval_report(path)

    assert exc.value.line == 3
    assert str(path) in str(exc.value)


def test_read_eval_report_wrong_shape(tmp_path):
    path = tmp_path / "other.json"
    path.write_text('{"label": "x"}')

    with pytest.raises(ReportParseError):
        read_eval_report(path)


def test_load_inputs_dispatch(teacher_report, profile, records, tmp_path):
    """Test inputs are routed by file suffix."""
    eval_path = write_eval_report(teacher_report, tmp_path / "teacher.eval.json")
    profile_path = write_profile(profile, tmp_path / "profile.csv")
    log_path = tmp_path / "heal.log.jsonl"
    log_path.write_text("".join(r.model_dump_json() + "\n" for r in records))

    inputs = load_inputs([eval_path, profile_path, log_path])

    assert inputs.evals == [teacher_report]
    assert inputs.profiles[0][1] == profile
    assert inputs.logs[0][1] == records
    assert len(inputs) == 3


def test_load_inputs_rejects_unknown(tmp_path):
    with pytest.raises(PreconditionError):
        load_inputs([])
    with pytest.raises(ReportParseError):
        load_inputs([tmp_path / "notes.txt"])


def test_write_report_files(teacher_report, healed_report, profile, records, tmp_path):
    inputs = ReportInputs(
        evals=[teacher_report, healed_report],
        profiles=[(tmp_path / "profile.csv", profile)],
        logs=[(tmp_path / "heal.log.jsonl", records)],
    )

    written = write_report(inputs, tmp_path / "out")

    assert [p.name for p in written] == ["report.md", "profile.importance.csv", "heal.curve.csv"]
    assert "## Training log (heal.log.jsonl)" in written[0].read_text()
