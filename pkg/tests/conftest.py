"""Shared fixtures: a tiny task, tiny models and small corpora."""

import pytest

from src.compress import copy_retained, make_plan
from src.model import init_params
from src.schemas import DistillConfig, ModelConfig, TaskConfig, TrainConfig
from src.taskgen import make_corpus


@pytest.fixture
def task():
    return TaskConfig(content_vocab=8, min_len=2, max_len=4, n_speakers=4, max_seq_len=32, train_seed=11, eval_seed=12)


@pytest.fixture
def model_config(task):
    return ModelConfig(vocab_size=task.vocab_size, d_model=16, n_heads=2, n_layers=4, d_ff=32, max_seq_len=32, seed=3)


@pytest.fixture
def teacher(model_config):
    return init_params(model_config)


@pytest.fixture
def train_corpus(task):
    return make_corpus(task, 24, "train")


@pytest.fixture
def eval_corpus(task):
    return make_corpus(task, 8, "eval")


@pytest.fixture
def plan():
    return make_plan(4, [0, 2])


@pytest.fixture
def student(teacher, plan):
    return copy_retained(teacher, plan)


@pytest.fixture
def train_config():
    return TrainConfig(steps=4, batch_size=4, learning_rate=1e-2, warmup_steps=2, log_every=2, eval_every=0, eval_samples=4)


@pytest.fixture
def distill_config():
    return DistillConfig(steps=3, batch_size=4, learning_rate=1e-3, log_every=1, eval_every=0, eval_samples=4)
