"""
Shared fixtures: a tiny experiment config and its benchmark
"""

import pytest

from config import ExperimentConfig
from shift_shapes import make_benchmark

TINY_DATASET = {"height": 16, "width": 16, "n_source_train": 8, "n_target_train": 6, "n_target_val": 4}


def tiny_config(**overrides) -> ExperimentConfig:
    """Small enough to train a few dozen iterations in seconds"""
    data = {"iterations": 4, "eval_every": 2, "batch_size": 2,
            "dataset": dict(TINY_DATASET),
            "dacal": {"mtn_hidden": 8, "mtn_layers": 2},
            "evaluation": {"pixels_per_image": 256}}
    for key, value in overrides.items():
        if isinstance(value, dict):
            data.setdefault(key, {}).update(value)
        else:
            data[key] = value
    return ExperimentConfig.from_dict(data)


@pytest.fixture
def tiny_benchmark():
    return make_benchmark(tiny_config().dataset, seed=0)


@pytest.fixture
def batch(tiny_benchmark):
    """(source images, source labels, target images) with two images each"""
    source = tiny_benchmark.source_train
    return (source.image_tensor([0, 1]), source.label_tensor([0, 1]),
            tiny_benchmark.target_train.image_tensor([0, 1]))
