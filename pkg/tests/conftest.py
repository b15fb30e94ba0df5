"""Shared trained-model fixtures and the acceptance summary printer."""

import numpy as np
import pytest

from cfrpatch import models
from cfrpatch.data import synth_shapes

ACCEPTANCE_LINES = []

TRAIN_N, TRAIN_SEED = 1200, 1
EVAL_N, EVAL_SEED = 600, 1000
BATCH = 128


def train_zoo(name: str, data, **overrides):
    cfg = models.TrainConfig(epochs=3, seed=0, lr=models.DEFAULT_LR[name], **overrides)
    return models.train(models.build(models.zoo_spec(name), seed=0), data, cfg)


def first_correct(model, dataset, n):
    x, y = dataset.arrays()
    keep = np.flatnonzero(models.predict(model, x) == y)[:n]
    return dataset.subset(keep)


@pytest.fixture(scope="session")
def train_set():
    return synth_shapes(TRAIN_N, seed=TRAIN_SEED)


@pytest.fixture(scope="session")
def eval_pool():
    return synth_shapes(EVAL_N, seed=EVAL_SEED)


@pytest.fixture(scope="session")
def cnn_s_run(train_set):
    return train_zoo("cnn-s", train_set)


@pytest.fixture(scope="session")
def cnn_s(cnn_s_run):
    return cnn_s_run[0]


@pytest.fixture(scope="session")
def cnn_m(train_set):
    return train_zoo("cnn-m", train_set)[0]


@pytest.fixture(scope="session")
def protected_s(train_set):
    return train_zoo("cnn-s", train_set, adversarial=models.AdversarialMode(steps=7, alpha=2 / 255, eps=8 / 255))[0]


@pytest.fixture(scope="session")
def batch(cnn_s, eval_pool):
    """128 evaluation images that cnn-s classifies correctly."""
    b = first_correct(cnn_s, eval_pool, BATCH)
    assert len(b) == BATCH
    return b


@pytest.fixture(scope="session")
def small_model():
    """Untrained cnn-s on 8x8 inputs for cheap gradient checks."""
    return models.build(models.zoo_spec("cnn-s", input_shape=(3, 8, 8)), seed=3)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
