"""Tests for the healing objective and the heal loop."""

import math

import numpy as np
import pytest

from src.checkpoint import model_hash
from src.compress import copy_retained, identity_plan, make_plan
from src.distill import (
    attention_loss,
    attention_mask,
    composite_loss,
    embedding_loss,
    heal,
    latent_loss,
    logit_loss,
    skew_kl,
)
from src.errors import NumericError, PlanError, PreconditionError, ShapeError
from src.model import forward
from src.schemas import DistillConfig
from src.taskgen import pad_batch
from src.tensor import Tensor, backward
from src.train import read_train_log


@pytest.fixture
def batch(task, train_corpus):
    return pad_batch(task, train_corpus.samples[:3])


@pytest.fixture
def tokens(task):
    return np.array([task.bos_id, 1, 2, task.sep_id, 3, 4, task.sep_id, 1, task.sep_id])


def test_skew_kl_worked_example():
    """Test the two-outcome example against direct evaluation."""
    expected = 0.9 * math.log(0.9 / 0.54) + 0.1 * math.log(0.1 / 0.46)

    assert skew_kl([0.9, 0.1], [0.5, 0.5], 0.1) == pytest.approx(expected, abs=1e-12)
    assert skew_kl([0.9, 0.1], [0.5, 0.5], 0.1) == pytest.approx(0.3071, abs=1e-4)


def test_skew_kl_zero_cases():
    assert skew_kl([0.2, 0.3, 0.5], [0.2, 0.3, 0.5], 0.1) == 0.0
    assert skew_kl([0.9, 0.1], [0.5, 0.5], 1.0) == 0.0


def test_skew_kl_finite_off_support():
    """Test q may vanish where p does not."""
    value = skew_kl([0.5, 0.5], [1.0, 0.0], 0.1)

    assert math.isfinite(value)
    assert value > 0


def test_skew_kl_rejects_bad_input():
    with pytest.raises(NumericError):
        skew_kl([0.5, 0.4], [0.5, 0.5], 0.1)
    with pytest.raises(NumericError):
        skew_kl([1.5, -0.5], [0.5, 0.5], 0.1)
    with pytest.raises(ShapeError):
        skew_kl([0.5, 0.5], [0.2, 0.3, 0.5], 0.1)
    with pytest.raises(PreconditionError):
        skew_kl([0.5, 0.5], [0.5, 0.5], 0.0)


def test_logit_loss_matches_scalar_skew_kl():
    """Test the batched loss averages per-position skew KL over the mask."""
    rng = np.random.default_rng(0)
    student = rng.standard_normal((4, 6))
    teacher = rng.standard_normal((4, 6))
    mask = np.array([True, False, True, True])

    def probs(z):
        e = np.exp(z - z.max())
        return e / e.sum()

    expected = np.mean([skew_kl(probs(teacher[i]), probs(student[i]), 0.1) for i in (0, 2, 3)])
    value = logit_loss(Tensor(student), teacher, mask, 0.1).item()

    assert value == pytest.approx(expected, rel=1e-9)


def test_logit_loss_needs_positions():
    with pytest.raises(PreconditionError):
        logit_loss(Tensor(np.zeros((2, 3))), np.zeros((2, 3)), np.zeros(2, dtype=bool), 0.1)


def test_latent_loss_oracle(teacher, student, plan, tokens):
    """Test dynamic and same-index alignment against direct mean squared errors."""
    s = forward(student, tokens)
    t = forward(teacher, tokens)

    def mse(pairs):
        total = sum(float(np.sum((s.layer_outputs[j].values - t.output_of(k).values) ** 2)) for j, k in pairs)
        return total / (len(pairs) * s.layer_outputs[0].values.size)

    assert latent_loss(s, t, plan).item() == pytest.approx(mse([(0, 1), (1, 3)]), rel=1e-12)
    assert latent_loss(s, t, plan, "same_index").item() == pytest.approx(mse([(0, 0), (1, 2)]), rel=1e-12)


def test_attention_loss_oracle(teacher, student, plan, tokens):
    s = forward(student, tokens)
    t = forward(teacher, tokens)
    causal = np.tril(np.ones((len(tokens), len(tokens)), dtype=bool))
    total = 0.0
    for j, k in [(0, 1), (1, 3)]:
        diff = s.attention_of(s.executed[j]).values - t.attention_of(k).values
        total += float(np.sum(diff[causal] ** 2))

    assert attention_loss(s, t, plan).item() == pytest.approx(total / (2 * causal.sum()), rel=1e-12)


def test_attention_mask_excludes_padding():
    valid = np.array([True, True, False])

    assert attention_mask(valid).tolist() == [
        [True, False, False],
        [True, True, False],
        [False, False, False],
    ]


def test_identity_alignment_modes_agree(teacher, tokens):
    plan = identity_plan(4)
    s = forward(copy_retained(teacher, plan), tokens)
    t = forward(teacher, tokens)

    assert latent_loss(s, t, plan, "dynamic").item() == latent_loss(s, t, plan, "same_index").item()
    assert attention_loss(s, t, plan, "dynamic").item() == attention_loss(s, t, plan, "same_index").item()


def test_embedding_loss_single_row_perturbation(teacher, student, tokens, model_config):
    """Test perturbing one embedding coordinate by delta costs hits * delta^2 / (T * d)."""
    delta = 0.01
    row = 1
    student.token_embedding.values[row, 3] += delta
    hits = int(np.sum(tokens == row))

    value = embedding_loss(forward(student, tokens), forward(teacher, tokens)).item()

    assert value == pytest.approx(hits * delta**2 / (len(tokens) * model_config.d_model), rel=1e-9)


def test_embedding_loss_masks_padding(teacher, student, tokens):
    student.token_embedding.values[tokens[-1], 0] += 1.0
    valid = np.ones(len(tokens), dtype=bool)
    valid[-1] = False

    value = embedding_loss(forward(student, tokens), forward(teacher, tokens), valid).item()
    hits = int(np.sum(tokens[:-1] == tokens[-1]))

    assert hits == 2
    assert value == pytest.approx(hits / ((len(tokens) - 1) * student.config.d_model), abs=1e-12)


def test_traces_must_share_tokens(teacher, student, plan, tokens):
    other = tokens.copy()
    other[1] = 5

    with pytest.raises(PreconditionError):
        latent_loss(forward(student, tokens), forward(teacher, other), plan)
    with pytest.raises(ShapeError):
        embedding_loss(forward(student, tokens), forward(teacher, tokens[:-1]))


def test_trace_depths_must_fit_plan(teacher, plan, tokens):
    with pytest.raises(PlanError):
        latent_loss(forward(teacher, tokens), forward(teacher, tokens), plan)


def test_identity_prune_zeroes_distillation_terms(teacher, batch):
    """Test every alignment term is exactly zero when nothing was pruned."""
    plan = identity_plan(4)
    losses, _ = composite_loss(copy_retained(teacher, plan), teacher, batch, plan, DistillConfig())

    assert losses.logit == 0.0
    assert losses.latent == 0.0
    assert losses.attention == 0.0
    assert losses.embedding == 0.0
    assert losses.total == pytest.approx(0.25 * losses.ce, abs=1e-15)


def test_breakdown_recombines_to_total(teacher, student, plan, batch):
    """Test total = alpha*ce + (1-alpha)/4 * sum of terms."""
    cfg = DistillConfig()
    losses, total = composite_loss(student, teacher, batch, plan, cfg)
    terms = losses.logit + losses.latent + losses.attention + losses.embedding

    assert cfg.distill_weight == 0.1875
    assert losses.total == total.item()
    assert losses.total == pytest.approx(0.25 * losses.ce + 0.1875 * terms, abs=1e-10)
    assert min(losses.logit, losses.latent, losses.attention) > 0


def test_alpha_one_collapses_to_cross_entropy(teacher, student, plan, batch):
    losses, _ = composite_loss(student, teacher, batch, plan, DistillConfig(alpha=1.0))

    assert losses.total == losses.ce


def test_disabled_terms_report_zero(teacher, student, plan, batch):
    cfg = DistillConfig(use_logit=False, use_attention=False)
    losses, _ = composite_loss(student, teacher, batch, plan, cfg)

    assert losses.logit == 0.0
    assert losses.attention == 0.0
    assert losses.total == pytest.approx(0.25 * losses.ce + 0.1875 * (losses.latent + losses.embedding), abs=1e-10)


def test_composite_loss_plan_mismatch(teacher, student, batch):
    with pytest.raises(PlanError):
        composite_loss(student, teacher, batch, make_plan(4, [0, 1, 2]), DistillConfig())


def test_teacher_receives_no_gradient(teacher, student, plan, batch):
    _, total = composite_loss(student, teacher, batch, plan, DistillConfig())
    backward(total)

    assert all(t.grad is None for t in teacher.parameters())
    assert student.output_projection.grad is not None


def test_composite_loss_gradients(teacher, student, plan, batch):
    """Test the composite gradient against central differences on a few student weights."""
    cfg = DistillConfig()
    _, total = composite_loss(student, teacher, batch, plan, cfg)
    backward(total)

    eps = 1e-6
    checked = [
        (student.layers[0].b_ff2, (0,)),
        (student.layers[1].w_q, (2, 3)),
        (student.token_embedding, (1, 4)),
        (student.final_bias, (5,)),
    ]
    for tensor, index in checked:
        analytic = tensor.grad[index]
        original = tensor.values[index]
        tensor.values[index] = original + eps
        plus = composite_loss(student, teacher, batch, plan, cfg)[0].total
        tensor.values[index] = original - eps
        minus = composite_loss(student, teacher, batch, plan, cfg)[0].total
        tensor.values[index] = original
        assert analytic == pytest.approx((plus - minus) / (2 * eps), rel=1e-4, abs=1e-7)


def test_heal_zero_steps_returns_student(teacher, student, plan, task, train_corpus, distill_config):
    cfg = distill_config.model_copy(update={"steps": 0})
    result = heal(student, teacher, plan, train_corpus.samples, task, cfg, order_seed=5)

    assert model_hash(result.params) == model_hash(student)
    assert result.params is not student
    assert result.records == []
    assert result.tokens_seen == 0


def test_heal_leaves_inputs_untouched(teacher, student, plan, task, train_corpus, distill_config):
    teacher_before, student_before = model_hash(teacher), model_hash(student)
    result = heal(student, teacher, plan, train_corpus.samples, task, distill_config, order_seed=5)

    assert model_hash(teacher) == teacher_before
    assert model_hash(student) == student_before
    assert model_hash(result.params) != student_before


def test_heal_is_deterministic(teacher, student, plan, task, train_corpus, distill_config, tmp_path):
    """Test identical inputs give identical weights and logs."""
    first = heal(
        student, teacher, plan, train_corpus.samples, task, distill_config, order_seed=5, log_path=tmp_path / "a.jsonl"
    )
    second = heal(
        student, teacher, plan, train_corpus.samples, task, distill_config, order_seed=5, log_path=tmp_path / "b.jsonl"
    )

    assert model_hash(first.params) == model_hash(second.params)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_heal_log_records(teacher, student, plan, task, train_corpus, distill_config, tmp_path):
    result = heal(
        student, teacher, plan, train_corpus.samples, task, distill_config, order_seed=5, log_path=tmp_path / "heal.jsonl"
    )
    records = read_train_log(tmp_path / "heal.jsonl")

    assert records == result.records
    assert [r.step for r in records] == [1, 2, 3]
    assert all(r.phase == "heal" for r in records)
    assert records[-1].tokens_seen == result.tokens_seen
    for r in records:
        terms = r.losses.logit + r.losses.latent + r.losses.attention + r.losses.embedding
        assert r.losses.total == pytest.approx(0.25 * r.losses.ce + 0.1875 * terms, abs=1e-10)


def test_heal_depth_mismatch(teacher, task, train_corpus, distill_config):
    plan = make_plan(4, [0, 2])
    with pytest.raises(PlanError):
        heal(teacher, teacher, plan, train_corpus.samples, task, distill_config, order_seed=5)
