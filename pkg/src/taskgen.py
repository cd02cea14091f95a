"""
Taskgen - Synthetic prompt-pair corpus.

Each sample hides a "speaker" shift s; the model sees (x1, y1) with
y1 = (x1 + s) mod V and must continue x2 with y2 = (x2 + s) mod V.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence, Union

import numpy as np
from pydantic import ValidationError

from src.errors import ConfigError, PreconditionError, ReportParseError
from src.logger import get_logger
from src.schemas import Corpus, Sample, TaskConfig

logger = get_logger(__name__)

Split = Literal["train", "eval"]


def apply_shift(segment: list[int], shift: int, content_vocab: int) -> list[int]:
    return [(token + shift) % content_vocab for token in segment]


def build_sample(task: TaskConfig, x1: list[int], y1: list[int], x2: list[int], y2: list[int], speaker_id: int) -> Sample:
    """Pack segments as [BOS] x1 [SEP] y1 [SEP] x2 [SEP] y2 [EOS]."""
    prefix = [task.bos_id, *x1, task.sep_id, *y1, task.sep_id, *x2, task.sep_id]
    packed = [*prefix, *y2, task.eos_id]
    if len(packed) > task.max_seq_len:
        raise ConfigError(f"packed length {len(packed)} exceeds max_seq_len {task.max_seq_len}")
    loss_mask = [False] * len(prefix) + [True] * len(y2) + [False]
    return Sample(x1=x1, y1=y1, x2=x2, y2=y2, speaker_id=speaker_id, packed=packed, loss_mask=loss_mask)


def make_sample(task: TaskConfig, rng_seed: Union[int, list[int]]) -> Sample:
    """Draw one sample deterministically from `rng_seed`."""
    if task.packed_max_len > task.max_seq_len:
        raise ConfigError(
            f"segments up to {task.max_len} tokens pack to {task.packed_max_len} > max_seq_len {task.max_seq_len}"
        )
    rng = np.random.default_rng(rng_seed)
    speaker = int(rng.integers(task.n_speakers))
    x1 = rng.integers(task.content_vocab, size=int(rng.integers(task.min_len, task.max_len + 1))).tolist()
    x2 = rng.integers(task.content_vocab, size=int(rng.integers(task.min_len, task.max_len + 1))).tolist()
    return build_sample(
        task,
        x1=x1,
        y1=apply_shift(x1, speaker, task.content_vocab),
        x2=x2,
        y2=apply_shift(x2, speaker, task.content_vocab),
        speaker_id=speaker,
    )


def split_seed(task: TaskConfig, split: Split) -> int:
    seed = task.train_seed if split == "train" else task.eval_seed
    if seed is None:
        raise ConfigError(f"task config has no {split} seed; resolve the experiment config first")
    return seed


def make_corpus(task: TaskConfig, n: int, split: Split) -> Corpus:
    """Generate `n` samples of `split`; sample i is seeded by (split seed, i)."""
    if n < 1:
        raise PreconditionError(f"corpus size must be at least 1, got {n}")
    seed = split_seed(task, split)
    samples = [make_sample(task, [seed, index]) for index in range(n)]
    return Corpus(split=split, seed=seed, samples=samples)


def prompt_tokens(task: TaskConfig, sample: Sample) -> list[int]:
    """[BOS] x1 [SEP] y1 [SEP] x2 [SEP], the conditioning prefix for generation."""
    return sample.packed[: len(sample.packed) - len(sample.y2) - 1]


def target_mask(task: TaskConfig, sample: Sample) -> list[bool]:
    """Supervised positions of `packed`: y2 plus EOS, and y1 when prompt loss is on."""
    mask = list(sample.loss_mask)
    mask[-1] = True
    if task.include_prompt_loss:
        start = 1 + len(sample.x1) + 1
        for position in range(start, start + len(sample.y1)):
            mask[position] = True
    return mask


def write_corpus(corpus: Corpus, path: Union[str, Path]) -> Path:
    """One JSON record per line: the four segments and speaker_id."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        f.write(json.dumps({"split": corpus.split, "seed": corpus.seed}) + "\n")
        for sample in corpus.samples:
            f.write(json.dumps(sample.segments()) + "\n")
    logger.info(f"Wrote {len(corpus)} {corpus.split} samples to {path}")
    return path


def read_corpus(task: TaskConfig, path: Union[str, Path]) -> Corpus:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"corpus file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ReportParseError(str(path), 1, "empty corpus file")
    try:
        header = json.loads(lines[0])
        split, seed = header["split"], header["seed"]
    except (ValueError, KeyError) as e:
        raise ReportParseError(str(path), 1, f"bad corpus header: {e}") from e
    samples = []
    for number, line in enumerate(lines[1:], start=2):
        try:
            record = json.loads(line)
            samples.append(build_sample(task, **record))
        except (ValueError, TypeError, ValidationError) as e:
            raise ReportParseError(str(path), number, f"bad sample record: {e}") from e
    return Corpus(split=split, seed=seed, samples=samples)


@dataclass
class Batch:
    """Right-padded token batch; `valid` marks non-pad input positions."""

    inputs: np.ndarray
    targets: np.ndarray
    target_mask: np.ndarray
    valid: np.ndarray

    @property
    def n_tokens(self) -> int:
        return int(self.valid.sum())


def pad_batch(task: TaskConfig, samples: Sequence[Sample], shift: bool = True) -> Batch:
    """
    Stack samples into a padded batch.

    With `shift`, inputs are packed[:-1] and targets packed[1:] (next-token
    training); without it the full packed sequences are inputs and nothing is
    supervised (teacher-forced latent inspection).
    """
    if not samples:
        raise PreconditionError("pad_batch: no samples")
    rows = [s.packed[:-1] if shift else s.packed for s in samples]
    width = max(len(r) for r in rows)
    inputs = np.full((len(samples), width), task.pad_id, dtype=np.int64)
    targets = np.full((len(samples), width), task.pad_id, dtype=np.int64)
    target_mask_ = np.zeros((len(samples), width), dtype=bool)
    valid = np.zeros((len(samples), width), dtype=bool)
    for b, (sample, row) in enumerate(zip(samples, rows)):
        inputs[b, : len(row)] = row
        valid[b, : len(row)] = True
        if shift:
            targets[b, : len(row)] = sample.packed[1:]
            target_mask_[b, : len(row)] = target_mask(task, sample)[1:]
    return Batch(inputs=inputs, targets=targets, target_mask=target_mask_, valid=valid)
