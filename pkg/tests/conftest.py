import os
import sys

import pytest
import torch

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from src.config import DataConfig, ModelConfig, RunConfig, ScanConfig, TrainConfig  # noqa: E402
from src.kspace_sim import make_equispaced_mask  # noqa: E402


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(
        groups=1,
        units_per_group=1,
        patch_size=2,
        channels=8,
        scan=ScanConfig(d_state=4),
    )


@pytest.fixture
def tiny_run_cfg(tiny_model_cfg):
    return RunConfig(
        data=DataConfig(source="phantom", n=8, size=32, seed=0),
        model=tiny_model_cfg,
        train=TrainConfig(epochs=3, warmup_epochs=1, batch_size=2, seed=0, val_fraction=0.25, device="cpu"),
    )


@pytest.fixture
def mask32():
    return make_equispaced_mask(32, 4, 0.08, seed=0)


@pytest.fixture
def full_mask():
    def _make(width):
        return make_equispaced_mask(width, 1, 0.5, seed=0)
    return _make


def write_toml(path, text):
    with open(path, "w") as f:
        f.write(text)
    return str(path)


TINY_TOML = """
[data]
source = "phantom"
n = {n}
size = {size}
seed = 0

[model]
groups = 1
units_per_group = 1
patch_size = 2
channels = 8

[model.scan]
d_state = 4

[train]
epochs = {epochs}
warmup_epochs = 1
batch_size = 2
seed = 0
af = 4
center_fraction = {cf}
val_fraction = 0.25
device = "cpu"
"""


@pytest.fixture
def tiny_toml(tmp_path):
    def _make(n=8, size=32, epochs=2, cf=0.08, name="run.toml"):
        return write_toml(tmp_path / name, TINY_TOML.format(n=n, size=size, epochs=epochs, cf=cf))
    return _make
