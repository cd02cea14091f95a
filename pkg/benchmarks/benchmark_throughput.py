"""
Generation throughput benchmark: tokens/second against depth, with and
without the incremental decode cache.
"""

import statistics
import time

from src.model import generate_greedy, init_params
from src.schemas import ModelConfig, TaskConfig
from src.taskgen import make_corpus, prompt_tokens

NEVER_STOP = -1


def benchmark_generation(params, prompts, max_new: int, use_cache: bool, repeats: int = 3):
    """Tokens/second per repeat over all prompts (one warmup pass first)."""
    for prompt in prompts[:1]:
        generate_greedy(params, prompt, NEVER_STOP, max_new, use_cache=use_cache)
    rates = []
    for _ in range(repeats):
        start = time.perf_counter()
        generated = sum(len(generate_greedy(params, p, NEVER_STOP, max_new, use_cache=use_cache)) for p in prompts)
        rates.append(generated / (time.perf_counter() - start))
    return {
        "median": statistics.median(rates),
        "min": min(rates),
        "max": max(rates),
    }


def run_benchmarks():
    print("🚀 layerprune generation throughput")
    print("=" * 60)

    task = TaskConfig(train_seed=1, eval_seed=2)
    prompts = [prompt_tokens(task, s) for s in make_corpus(task, 8, "eval").samples]
    max_new = 2 * task.max_len
    baseline = None

    for depth in [8, 6, 4, 2]:
        config = ModelConfig(vocab_size=task.vocab_size, n_layers=depth, seed=0)
        params = init_params(config)
        print(f"\n📊 depth {depth}:")
        print("-" * 60)

        cached = benchmark_generation(params, prompts, max_new, use_cache=True)
        print(f"  cached:   {cached['median']:.1f} tok/s (min {cached['min']:.1f}, max {cached['max']:.1f})")
        uncached = benchmark_generation(params, prompts[:2], max_new, use_cache=False, repeats=1)
        print(f"  uncached: {uncached['median']:.1f} tok/s")
        print(f"  cache speed-up: {cached['median'] / uncached['median']:.2f}x")

        if baseline is None:
            baseline = cached["median"]
        else:
            print(f"  vs depth 8: {cached['median'] / baseline:.2f}x")

    print("\n" + "=" * 60)
    print("✅ Benchmark complete!")


if __name__ == "__main__":
    run_benchmarks()
