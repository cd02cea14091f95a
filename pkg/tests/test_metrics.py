"""Tests for error-rate scoring, throughput measurement and step timing."""

import time

import numpy as np
import pytest

from src.compress import copy_retained, make_plan
from src.errors import PreconditionError
from src.metrics import (
    MetricsCollector,
    Timer,
    corpus_error_rate,
    edit_distance,
    error_rate,
    evaluate_model,
    max_new_for,
    measure_throughput,
)
from src.model import init_params, param_count
from src.schemas import ERROR_METRIC_NAME, ModelConfig
from src.taskgen import prompt_tokens


def reference_distance(a, b):
    """Textbook dynamic-programming edit distance."""
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        table[i][0] = i
    for j in range(len(b) + 1):
        table[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            table[i][j] = min(
                table[i - 1][j] + 1,
                table[i][j - 1] + 1,
                table[i - 1][j - 1] + (a[i - 1] != b[j - 1]),
            )
    return table[len(a)][len(b)]


def test_edit_distance_matches_dynamic_programming():
    """Test the library distance against a brute-force oracle on random pairs."""
    rng = np.random.default_rng(0)
    for _ in range(1000):
        a = rng.integers(0, 5, size=int(rng.integers(0, 13))).tolist()
        b = rng.integers(0, 5, size=int(rng.integers(0, 13))).tolist()
        assert edit_distance(a, b) == reference_distance(a, b)


def test_edit_distance_handles_large_ids():
    assert edit_distance([300, 70000], [300, 70001]) == 1


def test_edit_distance_basics():
    assert edit_distance([], []) == 0
    assert edit_distance([1, 2, 3], [1, 2, 3]) == 0
    assert edit_distance([], [1, 2]) == 2
    assert edit_distance([1, 2, 3], [1, 3]) == 1


def test_error_rate_is_pooled():
    """Test distances and reference lengths are summed before dividing."""
    pairs = [([], [1, 2, 3, 4]), ([5], [5])]

    assert error_rate(pairs) == pytest.approx(0.8)


def test_error_rate_ignores_pair_order():
    pairs = [([1, 2], [1, 2, 3]), ([], [4]), ([5, 6, 7], [5]), ([8], [9, 9])]

    assert error_rate(pairs) == error_rate(pairs[::-1]) == error_rate([pairs[2], pairs[0], pairs[3], pairs[1]])


def test_error_rate_can_exceed_one():
    assert error_rate([([1, 2, 3, 4], [9])]) == pytest.approx(4.0)


def test_error_rate_empty_references():
    with pytest.raises(PreconditionError):
        error_rate([([1], [])])
    with pytest.raises(PreconditionError):
        error_rate([])


def test_max_new_respects_context(teacher):
    assert max_new_for(teacher, [0] * 10, [1, 2, 3]) == 6
    assert max_new_for(teacher, [0] * 30, [1, 2, 3]) == 2


def test_corpus_error_rate_workers_agree(teacher, task, eval_corpus):
    """Test parallel scoring returns the serial result."""
    serial = corpus_error_rate(teacher, task, eval_corpus.samples)
    parallel = corpus_error_rate(teacher, task, eval_corpus.samples, workers=3)

    assert serial == parallel
    assert serial >= 0.0


def test_corpus_error_rate_no_samples(teacher, task):
    with pytest.raises(PreconditionError):
        corpus_error_rate(teacher, task, [])


def test_measure_throughput(teacher, task, eval_corpus):
    prompts = [prompt_tokens(task, s) for s in eval_corpus.samples[:2]]

    assert measure_throughput(teacher, prompts, max_new=4) > 0


def test_halving_depth_speeds_up_generation(task, eval_corpus):
    """Test a half-depth student generates faster than its full-depth teacher."""
    config = ModelConfig(vocab_size=task.vocab_size, d_model=16, n_heads=2, n_layers=8, d_ff=32, max_seq_len=32, seed=1)
    deep = init_params(config)
    shallow = copy_retained(deep, make_plan(8, [0, 2, 4, 6]))
    prompts = [prompt_tokens(task, s) for s in eval_corpus.samples[:4]]

    deep_rate = max(measure_throughput(deep, prompts, max_new=8) for _ in range(3))
    shallow_rate = max(measure_throughput(shallow, prompts, max_new=8) for _ in range(3))

    assert shallow_rate / deep_rate > 1.0


def test_measure_throughput_needs_prompts(teacher):
    with pytest.raises(PreconditionError):
        measure_throughput(teacher, [], max_new=4)


def test_evaluate_model(teacher, task, eval_corpus):
    """Test the eval report carries quality and size accounting."""
    report = evaluate_model(
        teacher, task, eval_corpus, label="teacher", n_samples=4, n_prompts=2, meta={"train_tokens": 1000}
    )

    assert report.label == "teacher"
    assert report.metric == ERROR_METRIC_NAME
    assert report.n_samples == 4
    assert report.error_rate == corpus_error_rate(teacher, task, eval_corpus.samples[:4])
    assert report.param_count == param_count(teacher)
    assert report.param_bytes == 8 * report.param_count
    assert report.depth == 4
    assert report.train_tokens == 1000
    assert report.heal_tokens == 0
    assert report.tokens_per_second > 0
    assert report.peak_memory_bytes > 0


def test_timer():
    """Test Timer context manager."""
    with Timer() as timer:
        time.sleep(0.01)

    assert timer.elapsed_ms >= 10


def test_metrics_collector_initialization():
    """Test metrics collector initialization."""
    collector = MetricsCollector(window_size=50)

    assert collector.window_size == 50
    assert len(collector.step_latencies) == 0
    assert collector.get_step_stats()["count"] == 0


def test_record_step():
    """Test recording training-step latencies."""
    collector = MetricsCollector()

    collector.record_step(100, tokens=10)
    collector.record_step(150, tokens=20)
    collector.record_step(120, tokens=30)

    stats = collector.get_step_stats()

    assert stats["count"] == 3
    assert stats["avg_latency_ms"] == pytest.approx(123.33, rel=0.01)
    assert stats["max_latency_ms"] == 150
    assert stats["tokens_seen"] == 60


def test_step_latency_window():
    """Test that step latencies respect window size."""
    collector = MetricsCollector(window_size=3)

    for latency in (400, 100, 200, 300):
        collector.record_step(latency, tokens=1)

    stats = collector.get_step_stats()

    # Count tracks total steps, not window size
    assert stats["count"] == 4
    assert stats["max_latency_ms"] == 300
    assert stats["tokens_seen"] == 4
