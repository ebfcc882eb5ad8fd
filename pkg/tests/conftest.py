"""
Shared fixtures: small datasets, task splits, models and configs.
"""

import numpy as np
import pytest

from Modules.data import generate_synthetic, make_task_sequence
from Modules.model import Model, expand_head
from Modules.schemas import EncoderSpec, ExperimentConfig, SplitSpec
from Modules.tensor import debug_numerics


@pytest.fixture(autouse=True)
def _numerics_off():
    debug_numerics(False)
    yield
    debug_numerics(False)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def small_dataset():
    return generate_synthetic(num_classes=6, dim=4, per_class=20, separation=5.0, seed=3)


@pytest.fixture
def three_tasks(small_dataset):
    return make_task_sequence(small_dataset, SplitSpec(kind="uniform", num_tasks=3, per_task=2, seed=1))


@pytest.fixture
def tiny_model(rng):
    model = Model(EncoderSpec(input_dim=4, hidden_dims=[6, 5, 4, 3]), rng)
    expand_head(model, 2, rng)
    return model


def make_config(**overrides) -> ExperimentConfig:
    payload = {
        "name": "test",
        "dataset": {"kind": "synthetic", "num_classes": 6, "dim": 4, "per_class": 20, "separation": 5.0},
        "split": {"kind": "uniform", "num_tasks": 2, "per_task": 3},
        "method": {"name": "Naive", "head_mode": "softmax"},
        "hidden_dims": [8, 8, 8, 4],
        "schedule": {"epochs": 2, "lr_decay_epochs": [1], "batch_size": 16},
        "analysis": {"probe_size": 8},
        "seeds": [0],
    }
    payload.update(overrides)
    return ExperimentConfig.model_validate(payload)


@pytest.fixture
def config_factory():
    return make_config
