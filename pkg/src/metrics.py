"""
Performance Metrics - Token error rate, generation throughput and
training-loop timing windows.
"""

import time
import tracemalloc
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import AbstractSet, Dict, Optional, Sequence

import Levenshtein

from src.errors import PreconditionError
from src.logger import get_logger, log_event
from src.model import ModelParams, generate_greedy, param_bytes, param_count
from src.schemas import Corpus, EvalReport, Sample, TaskConfig
from src.taskgen import prompt_tokens

logger = get_logger(__name__)

NEVER_STOP = -1


def edit_distance(hyp: Sequence[int], ref: Sequence[int]) -> int:
    """Levenshtein distance (unit-cost substitutions, insertions, deletions)."""
    return int(Levenshtein.distance(list(hyp), list(ref)))


def error_rate(pairs: Sequence[tuple[Sequence[int], Sequence[int]]]) -> float:
    """
    Pooled (micro-averaged) error rate: Σ distances / Σ reference lengths.
    """
    total_ref = sum(len(ref) for _, ref in pairs)
    if total_ref == 0:
        raise PreconditionError("error_rate: references have zero total length")
    return sum(edit_distance(hyp, ref) for hyp, ref in pairs) / total_ref


def max_new_for(params: ModelParams, prompt: Sequence[int], reference: Sequence[int]) -> int:
    """Generation cap for scoring: twice the reference length, within the context window."""
    return max(0, min(2 * len(reference), params.config.max_seq_len - len(prompt)))


def generate_for_sample(
    params: ModelParams, task: TaskConfig, sample: Sample, skip: AbstractSet[int] = frozenset()
) -> list[int]:
    prompt = prompt_tokens(task, sample)
    return generate_greedy(params, prompt, task.eos_id, max_new_for(params, prompt, sample.y2), skip)


def corpus_error_rate(
    params: ModelParams,
    task: TaskConfig,
    samples: Sequence[Sample],
    skip: AbstractSet[int] = frozenset(),
    workers: int = 1,
) -> float:
    """Greedy-decode every sample's y2 (optionally with layers skipped) and pool the error rate."""
    if not samples:
        raise PreconditionError("corpus_error_rate: no samples")

    def hypothesis(sample: Sample) -> list[int]:
        return generate_for_sample(params, task, sample, skip)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            hyps = list(pool.map(hypothesis, samples))
    else:
        hyps = [hypothesis(sample) for sample in samples]
    empty = sum(1 for hyp in hyps if not hyp)
    if empty:
        logger.warning(f"{empty}/{len(hyps)} generations were empty (skip={sorted(skip)})")
    return error_rate([(hyp, sample.y2) for hyp, sample in zip(hyps, samples)])


class Timer:
    """Context manager for timing operations."""

    def __init__(self):
        self.start_time: Optional[float] = None
        self.elapsed_ms: float = 0.0

    def __enter__(self):
        self.start_time = time.perf_counter()
        return self

    def __exit__(self, *args):
        if self.start_time is not None:
            self.elapsed_ms = (time.perf_counter() - self.start_time) * 1000


def _generate_all(params: ModelParams, prompts: Sequence[list[int]], max_new: int, stop_token: int) -> int:
    return sum(len(generate_greedy(params, prompt, stop_token, max_new)) for prompt in prompts)


def measure_throughput(
    params: ModelParams,
    prompts: Sequence[list[int]],
    max_new: int,
    stop_token: int = NEVER_STOP,
) -> float:
    """
    Generated tokens per second over `prompts`, after one untimed warmup pass.

    Runs single-threaded; callers must not share the CPU with other work.
    """
    if not prompts:
        raise PreconditionError("measure_throughput: need at least one prompt")
    _generate_all(params, prompts, max_new, stop_token)
    with Timer() as timer:
        generated = _generate_all(params, prompts, max_new, stop_token)
    if generated == 0:
        raise PreconditionError("measure_throughput: no tokens were generated")
    return generated / (timer.elapsed_ms / 1000.0)


def measure_peak_memory(params: ModelParams, prompts: Sequence[list[int]], max_new: int) -> int:
    """Peak traced allocation (bytes) while generating; the working-memory analog of VRAM."""
    tracemalloc.start()
    try:
        _generate_all(params, prompts, max_new, NEVER_STOP)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return int(peak)


def evaluate_model(
    params: ModelParams,
    task: TaskConfig,
    corpus: Corpus,
    label: str,
    n_samples: int,
    n_prompts: int,
    workers: int = 1,
    meta: Optional[dict] = None,
) -> EvalReport:
    """TER on the first `n_samples` eval samples plus efficiency accounting."""
    samples = corpus.samples[:n_samples]
    rate = corpus_error_rate(params, task, samples, workers=workers)
    prompts = [prompt_tokens(task, s) for s in corpus.samples[:n_prompts]]
    max_new = min(2 * task.max_len, params.config.max_seq_len - max(len(p) for p in prompts))
    tokens_per_second = measure_throughput(params, prompts, max_new)
    meta = meta or {}
    report = EvalReport(
        label=label,
        error_rate=rate,
        n_samples=len(samples),
        tokens_per_second=tokens_per_second,
        param_count=param_count(params),
        param_bytes=param_bytes(params),
        depth=params.config.n_layers,
        peak_memory_bytes=measure_peak_memory(params, prompts[:1], max_new),
        train_tokens=int(meta.get("train_tokens", 0)),
        heal_tokens=int(meta.get("heal_tokens", 0)),
    )
    log_event(
        logger,
        "eval",
        label=label,
        ter=report.error_rate,
        tokens_per_second=report.tokens_per_second,
        depth=report.depth,
        params=report.param_count,
    )
    return report


@dataclass
class MetricsCollector:
    """
    Sliding-window timing of training steps.
    """

    window_size: int = 100

    step_latencies: deque = field(default_factory=lambda: deque(maxlen=100))
    step_count: int = 0
    tokens_seen: int = 0

    def __post_init__(self):
        """Initialize deques with correct maxlen."""
        self.step_latencies = deque(maxlen=self.window_size)

    def record_step(self, latency_ms: float, tokens: int) -> None:
        self.step_latencies.append(latency_ms)
        self.step_count += 1
        self.tokens_seen += tokens

    def get_step_stats(self) -> Dict[str, float]:
        """Step statistics over the current window; counts are cumulative."""
        if not self.step_latencies:
            return {"count": 0, "avg_latency_ms": 0.0, "max_latency_ms": 0.0, "tokens_seen": 0}

        latencies = list(self.step_latencies)
        return {
            "count": self.step_count,
            "avg_latency_ms": sum(latencies) / len(latencies),
            "max_latency_ms": max(latencies),
            "tokens_seen": self.tokens_seen,
        }
