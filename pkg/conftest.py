"""
Shared pytest fixtures for the skelseg test suite.

The "slow" marker tags the end-to-end runs on the synthetic corpus; deselect
them with `pytest -m "not slow"`.
"""

import numpy as np
import pytest

from skelseg.dataset import SynthConfig, synth_generate
from skelseg.trainer import TrainConfig


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end training runs (minutes)")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**overrides) -> TrainConfig:
    """A model small enough to train in well under a second per step"""
    data = {
        "epochs": 2,
        "batch_size": 2,
        "patch_size": 3,
        "encoder": {"stages": 1, "layers_per_stage": 2, "hidden": 8, "latent": 4},
        "temporal_decoder": {"hidden": [8, 4]},
        "hvq": {"num_actions": 3, "stale_patience": 2},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key] = {**data[key], **value}
        else:
            data[key] = value
    return TrainConfig.from_dict(data)


@pytest.fixture
def tiny():
    return tiny_config


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Six short labeled sequences, three classes, 4 joints in 3-D"""
    out = tmp_path_factory.mktemp("corpus")
    config = SynthConfig(classes=3, sequences=6, mean_segments=3, seed=7, patch_size=3, joints=4)
    manifest = synth_generate(out, config)
    return out / "manifest.json", manifest
