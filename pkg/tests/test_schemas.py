"""
Tests for data schemas (schemas.py)
"""

import pytest
from pydantic import ValidationError

from src.schemas import (
    ERROR_METRIC_NAME,
    DistillConfig,
    EvalReport,
    ImportanceProfile,
    LayerScore,
    LossBreakdown,
    ModelConfig,
    TaskConfig,
    TrainConfig,
    TrainLogRecord,
)


def test_model_config_defaults():
    """Test the default architecture."""
    config = ModelConfig()

    assert (config.d_model, config.n_heads, config.n_layers, config.d_ff) == (128, 4, 8, 512)
    assert config.head_dim == 32
    assert config.vocab_size == TaskConfig().vocab_size


def test_model_config_rejects_unknown_fields():
    with pytest.raises(ValidationError):
        ModelConfig(n_layer=4)


def test_model_config_requires_positive_sizes():
    with pytest.raises(ValidationError):
        ModelConfig(n_layers=0)


def test_distill_config_defaults():
    """Test default healing weights."""
    config = DistillConfig()

    assert config.alpha == 0.25
    assert config.skew_lambda == 0.1
    assert config.distill_weight == 0.1875
    assert config.target_mode == "dynamic"
    assert all([config.use_logit, config.use_latent, config.use_attention, config.use_embedding])


@pytest.mark.parametrize("field, value", [("alpha", -0.1), ("alpha", 1.1), ("skew_lambda", 0.0), ("skew_lambda", 1.5)])
def test_distill_config_ranges(field, value):
    with pytest.raises(ValidationError):
        DistillConfig(**{field: value})


def test_distill_config_rejects_unknown_target_mode():
    with pytest.raises(ValidationError):
        DistillConfig(target_mode="nearest")


def test_train_config_allows_zero_steps():
    assert TrainConfig(steps=0).steps == 0


def test_eval_report_defaults():
    report = EvalReport(
        label="teacher", error_rate=0.01, n_samples=8, tokens_per_second=100.0, param_count=10, param_bytes=80, depth=2
    )

    assert report.metric == ERROR_METRIC_NAME
    assert report.train_tokens == 0
    assert report.heal_tokens == 0


def test_eval_report_rejects_negative_error_rate():
    with pytest.raises(ValidationError):
        EvalReport(
            label="x", error_rate=-0.1, n_samples=1, tokens_per_second=1.0, param_count=1, param_bytes=8, depth=1
        )


def test_importance_profile_scores():
    profile = ImportanceProfile(
        layers=[LayerScore(layer_index=0, wli=0.5, cli=0.1), LayerScore(layer_index=1, wli=0.2, cli=0.3)],
        base_error_rate=0.0,
        model_hash="abc",
        eval_seed=1,
        n_samples=4,
    )

    assert profile.depth == 2
    assert profile.scores("wli") == [0.5, 0.2]
    assert profile.scores("cli") == [0.1, 0.3]
    assert profile.spearman is None


def test_train_log_record_json():
    """Test a log record serialises without timing fields."""
    record = TrainLogRecord(
        phase="heal", step=3, tokens_seen=120, learning_rate=5e-4, losses=LossBreakdown(total=1.0, ce=2.0, logit=0.5)
    )
    data = record.model_dump()

    assert data["losses"]["latent"] == 0.0
    assert data["eval_error_rate"] is None
    assert not any("ms" in key for key in data)
    assert TrainLogRecord.model_validate_json(record.model_dump_json()) == record
