"""
Importance - Per-layer scores from single-layer ablation (WLI) and from the
cosine distance between a layer's input and output latents (CLI).
"""

import csv
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from src.checkpoint import model_hash
from src.errors import PreconditionError, ReportParseError
from src.logger import get_logger, log_event
from src.metrics import corpus_error_rate
from src.model import ModelParams, forward
from src.schemas import ImportanceProfile, LayerScore, Sample, TaskConfig
from src.taskgen import pad_batch
from src.tensor import no_grad

logger = get_logger(__name__)

PROFILE_COLUMNS = ["layer_index", "wli", "cli", "wli_norm", "cli_norm"]
CLI_BATCH = 32


def _check_layer(params: ModelParams, layer: int) -> None:
    if not 0 <= layer < params.config.n_layers:
        raise PreconditionError(f"layer {layer} outside [0, {params.config.n_layers})")


def wli_score(params: ModelParams, task: TaskConfig, samples: Sequence[Sample], layer: int, workers: int = 1) -> float:
    """Pooled TER of greedy generations with `layer` removed."""
    _check_layer(params, layer)
    return corpus_error_rate(params, task, samples, skip={layer}, workers=workers)


def cosine_distances(inputs: np.ndarray, outputs: np.ndarray) -> np.ndarray:
    """1 - cos(input_t, output_t) for rows where neither vector has zero norm."""
    in_norm = np.linalg.norm(inputs, axis=-1)
    out_norm = np.linalg.norm(outputs, axis=-1)
    usable = (in_norm > 0) & (out_norm > 0)
    dots = (inputs[usable] * outputs[usable]).sum(axis=-1)
    cosine = np.clip(dots / (in_norm[usable] * out_norm[usable]), -1.0, 1.0)
    return 1.0 - cosine


def _layer_distances(params: ModelParams, task: TaskConfig, samples: Sequence[Sample]) -> list[list[np.ndarray]]:
    per_layer: list[list[np.ndarray]] = [[] for _ in range(params.config.n_layers)]
    with no_grad():
        for start in range(0, len(samples), CLI_BATCH):
            batch = pad_batch(task, samples[start : start + CLI_BATCH], shift=False)
            trace = forward(params, batch.inputs)
            for k, layer in enumerate(trace.executed):
                valid = batch.valid
                per_layer[layer].append(
                    cosine_distances(trace.layer_inputs[k].values[valid], trace.layer_outputs[k].values[valid])
                )
    return per_layer


def _mean_distance(chunks: list[np.ndarray], layer: int) -> float:
    distances = np.concatenate(chunks) if chunks else np.zeros(0)
    if distances.size == 0:
        raise PreconditionError(f"cli_score: every latent of layer {layer} has zero norm")
    return float(distances.mean())


def cli_score(params: ModelParams, task: TaskConfig, samples: Sequence[Sample], layer: int) -> float:
    """Mean cosine distance between the input and output latents of `layer`, teacher-forced."""
    _check_layer(params, layer)
    if not samples:
        raise PreconditionError("cli_score: no samples")
    return _mean_distance(_layer_distances(params, task, samples)[layer], layer)


def min_max(values: Sequence[float]) -> list[float]:
    lo, hi = min(values), max(values)
    if hi == lo:
        return [0.0 for _ in values]
    return [(v - lo) / (hi - lo) for v in values]


def _average_ranks(values: Sequence[float]) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    ranks[order] = np.arange(len(values), dtype=np.float64)
    for value in np.unique(values):
        tied = values == value
        ranks[tied] = ranks[tied].mean()
    return ranks


def spearman(a: Sequence[float], b: Sequence[float]) -> Optional[float]:
    """Rank correlation with average ranks for ties; None when either side is constant."""
    ra, rb = _average_ranks(a), _average_ranks(b)
    if np.std(ra) == 0 or np.std(rb) == 0:
        return None
    return float(np.corrcoef(ra, rb)[0, 1])


def build_profile(
    params: ModelParams,
    task: TaskConfig,
    samples: Sequence[Sample],
    eval_seed: int,
    workers: int = 1,
) -> ImportanceProfile:
    """WLI and CLI for every layer plus the unablated error rate."""
    if not samples:
        raise PreconditionError("build_profile: no samples")
    depth = params.config.n_layers
    base = corpus_error_rate(params, task, samples, workers=workers)
    log_event(logger, "importance.base", ter=base, samples=len(samples))

    def score(layer: int) -> float:
        value = wli_score(params, task, samples, layer)
        log_event(logger, "importance.wli", layer=layer, wli=value)
        return value

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            wli = list(pool.map(score, range(depth)))
    else:
        wli = [score(layer) for layer in range(depth)]

    distances = _layer_distances(params, task, samples)
    cli = [_mean_distance(distances[layer], layer) for layer in range(depth)]
    for layer in range(depth):
        logger.debug(f"layer {layer}: wli={wli[layer]:.6f} cli={cli[layer]:.6f}")

    rows = [
        LayerScore(layer_index=i, wli=wli[i], cli=cli[i], wli_norm=wn, cli_norm=cn)
        for i, (wn, cn) in enumerate(zip(min_max(wli), min_max(cli)))
    ]
    profile = ImportanceProfile(
        layers=rows,
        base_error_rate=base,
        model_hash=model_hash(params),
        eval_seed=eval_seed,
        n_samples=len(samples),
        spearman=spearman(wli, cli),
    )
    top_wli = max(range(depth), key=lambda i: (wli[i], -i))
    top_cli = max(range(depth), key=lambda i: (cli[i], -i))
    log_event(logger, "importance.summary", top_wli=top_wli, top_cli=top_cli, spearman=profile.spearman)
    if top_wli != top_cli:
        logger.info(f"WLI and CLI disagree on the most important layer ({top_wli} vs {top_cli})")
    return profile


def write_profile(profile: ImportanceProfile, path: Union[str, Path]) -> Path:
    """CSV table with a leading `# key=value;...` fingerprint line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "base_error_rate": repr(profile.base_error_rate),
        "model_hash": profile.model_hash,
        "eval_seed": str(profile.eval_seed),
        "n_samples": str(profile.n_samples),
        "spearman": "" if profile.spearman is None else repr(profile.spearman),
    }
    with path.open("w", encoding="utf-8", newline="") as f:
        f.write("# " + ";".join(f"{k}={v}" for k, v in meta.items()) + "\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(PROFILE_COLUMNS)
        for row in profile.layers:
            writer.writerow([row.layer_index, repr(row.wli), repr(row.cli), repr(row.wli_norm), repr(row.cli_norm)])
    return path


def read_profile(path: Union[str, Path]) -> ImportanceProfile:
    path = Path(path)
    if not path.exists():
        raise ReportParseError(str(path), 0, "profile file not found")
    lines = path.read_text(encoding="utf-8").splitlines()
    if len(lines) < 2 or not lines[0].startswith("# "):
        raise ReportParseError(str(path), 1, "missing fingerprint line")
    try:
        meta = dict(item.split("=", 1) for item in lines[0][2:].split(";"))
        header = {
            "base_error_rate": float(meta["base_error_rate"]),
            "model_hash": meta["model_hash"],
            "eval_seed": int(meta["eval_seed"]),
            "n_samples": int(meta["n_samples"]),
            "spearman": float(meta["spearman"]) if meta.get("spearman") else None,
        }
    except (KeyError, ValueError) as e:
        raise ReportParseError(str(path), 1, f"bad fingerprint line: {e}") from e
    if next(csv.reader([lines[1]])) != PROFILE_COLUMNS:
        raise ReportParseError(str(path), 2, f"expected columns {PROFILE_COLUMNS}")
    rows = []
    for number, record in enumerate(csv.reader(lines[2:]), start=3):
        try:
            index, wli, cli, wli_norm, cli_norm = record
            rows.append(
                LayerScore(
                    layer_index=int(index), wli=float(wli), cli=float(cli), wli_norm=float(wli_norm), cli_norm=float(cli_norm)
                )
            )
        except ValueError as e:
            raise ReportParseError(str(path), number, f"bad profile row: {e}") from e
    return ImportanceProfile(layers=rows, **header)
