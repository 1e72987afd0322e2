import os

import numpy as np
import pytest
import torch

from hetmt.config import ModelConfig, PhantomSpec, RunConfig, TrainConfig
from hetmt.model import build


def pytest_collection_modifyitems(config, items):
    if os.environ.get("HETMT_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="defina HETMT_RUN_SLOW=1 para rodar")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def small_spec():
    return PhantomSpec(image_size=(32, 32), spacing=(1.0, 1.0), seed=0)


@pytest.fixture
def tiny_model_config():
    """Todas as larguras = 2 (campo receptivo cabe num patch 8x8)."""
    return ModelConfig(
        variant="M4_multitask_hetero",
        trunk_features=(2, 2, 2, 2),
        dilations=(1, 2),
        repeats=1,
        branch_widths=(2, 2, 2, 2),
        num_classes=6,
    )


@pytest.fixture
def tiny_train_config():
    return TrainConfig(patch_size=8, batch_size=2, max_iterations=6, checkpoint_interval=2, log_every=2)


@pytest.fixture
def tiny_model(tiny_model_config):
    return build(tiny_model_config, init_seed=0)


@pytest.fixture
def tiny_run_config(tiny_model_config):
    """RunConfig completa de poucos segundos: fantomas 32x32, 4 iterações, T=4."""
    cfg = RunConfig()
    cfg.phantom.image_size = (32, 32)
    cfg.model = tiny_model_config
    cfg.train.patch_size = 16
    cfg.train.batch_size = 2
    cfg.train.max_iterations = 4
    cfg.train.checkpoint_interval = 2
    cfg.train.log_every = 2
    cfg.inference.T = 4
    cfg.inference.stride = 8
    return cfg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def float64():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)
