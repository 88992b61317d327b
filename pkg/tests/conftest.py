import numpy as np
import pytest

from slotcon.geometry import GridSpec
from slotcon.model import ModelConfig
from slotcon.synthdata import SceneConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the desk-scale end-to-end tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_grid():
    return GridSpec(64, 4)


@pytest.fixture
def small_model():
    return ModelConfig(image_size=64, grid_size=4, channels=(4, 8), strides=(4, 4), proj_hidden=8, proj_out=4,
                       proto_hidden=8, reg_hidden=8)


@pytest.fixture
def small_scene():
    return SceneConfig(image_size=64, slots_per_scene=(1, 2), slot_width=(20.0, 24.0), slot_depth=(24.0, 32.0),
                       line_width=2.0, edge_margin=6.0)


TINY = {
    "grid.image_size": 64,
    "grid.G": 4,
    "scene.slots_per_scene": [1, 2],
    "scene.slot_width": [20.0, 24.0],
    "scene.slot_depth": [24.0, 32.0],
    "scene.line_width": 2.0,
    "scene.edge_margin": 6.0,
    "model.channels": [4, 8],
    "model.strides": [4, 4],
    "model.proj_hidden": 8,
    "model.proj_out": 4,
    "model.proto_hidden": 8,
    "model.reg_hidden": 8,
    "loss.q_sh": [0.2, 0.8],
    "train.epochs": 2,
    "train.batch_size": 3,
    "train.decay_epochs": [1],
    "train.eval_every": 1,
    "train.bank_capacity": 16,
    "train.dtype": "float64",
    "data.train_scenes": 6,
    "data.test_scenes": 3,
}


@pytest.fixture
def tiny_flat():
    return dict(TINY)


@pytest.fixture
def make_settings():
    from slotcon.config import Settings

    def make(**overrides):
        flat = Settings().to_flat()
        flat.update(TINY)
        flat.update({key.replace("__", "."): value for key, value in overrides.items()})
        return Settings.from_flat(flat)

    return make
