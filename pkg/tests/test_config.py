import os

import pytest

from src.config import ConvPlacement, GateMode, RunConfig, ScanConfig, load_config
from src.errors import InvalidConfig

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "configs")


def write_toml(path, text):
    path.write_text(text)
    return str(path)


def test_desk_config_loads():
    cfg = load_config(os.path.join(CONFIG_DIR, "desk.toml"))
    assert cfg.data.size == 64 and cfg.data.n == 100
    assert cfg.model.groups == 2 and cfg.model.channels == 32
    assert cfg.model.scan.gate_mode is GateMode.GATE_BC
    assert cfg.model.scan.conv_placement is ConvPlacement.POST_SPLIT
    assert cfg.train.epochs == 30


def test_full_config_loads():
    cfg = load_config(os.path.join(CONFIG_DIR, "full.toml"))
    assert cfg.data.source == "fastmri"
    assert cfg.model.groups == 6 and cfg.model.channels == 64


def test_missing_sections_use_defaults(tmp_path):
    cfg = load_config(write_toml(tmp_path / "empty.toml", "[train]\nepochs = 10\n"))
    assert cfg.train.epochs == 10
    assert cfg.model == RunConfig().model


@pytest.mark.parametrize("text", [
    "[model]\nwidth = 3\n",
    "[extra]\nx = 1\n",
    "[model.scan]\ngate_mode = \"gate_everything\"\n",
    "[model.scan]\nconv_kernel = 4\n",
    "[model]\npatch_size = 3\n",
    "[train]\nwarmup_epochs = 10\nepochs = 10\n",
    "[data]\nsource = \"nifti\"\n",
    "[model\n",
])
def test_invalid_configs(tmp_path, text):
    with pytest.raises(InvalidConfig):
        load_config(write_toml(tmp_path / "bad.toml", text))


def test_missing_config_file(tmp_path):
    with pytest.raises(InvalidConfig):
        load_config(str(tmp_path / "absent.toml"))


def test_dt_rank_defaults_to_channels_over_16():
    assert ScanConfig().resolved_dt_rank(32) == 2
    assert ScanConfig().resolved_dt_rank(33) == 3
    assert ScanConfig(dt_rank=5).resolved_dt_rank(32) == 5


def test_af_override_picks_matching_center_fraction():
    cfg = RunConfig().with_overrides(af=8, patch=4, seed=3)
    assert cfg.train.af == 8 and cfg.train.center_fraction == 0.04
    assert cfg.model.patch_size == 4
    assert cfg.train.seed == 3 and cfg.data.seed == 3


def test_dict_round_trip():
    cfg = load_config(os.path.join(CONFIG_DIR, "desk.toml"))
    plain = cfg.to_dict()
    assert plain["model"]["scan"]["gate_mode"] == "gate_bc"
    assert RunConfig.from_dict(plain) == cfg
