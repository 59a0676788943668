
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum

from .errors import InvalidConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

# --- Environment ---

DATA_DIR = os.environ.get("HIFI_DATA_DIR", "")
CACHE_DIR = os.environ.get("HIFI_CACHE_DIR", os.path.join(os.path.expanduser("~"), ".cache", "hifi_recon"))
DEFAULT_DEVICE = os.environ.get("HIFI_DEVICE", "cpu")

# --- Acquisition Defaults ---

# acceleration factor -> fraction of fully sampled center columns
CENTER_FRACTIONS = {4: 0.08, 8: 0.04}
FASTMRI_SLICE_TRIM = 5
CC359_SLICE_TRIM = 15
FASTMRI_CROP = 320
CC359_CROP = 256

# --- Metrics ---

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03
ERROR_MAP_MAX = 0.2

# --- Storage ---

MAX_CACHED_DATASETS = 5
CHECKPOINT_BEST = "best.ckpt"
CHECKPOINT_LAST = "last.ckpt"
TRAIN_LOG = "train_log.csv"


class GateMode(str, Enum):
    GATE_BC = "gate_bc"
    GATE_ALL = "gate_all"
    GATE_PRE = "gate_pre"


class ConvPlacement(str, Enum):
    POST_SPLIT = "post_split"
    PRE_SPLIT = "pre_split"


@dataclass(frozen=True)
class ScanConfig:
    d_state: int = 16
    dt_rank: int | None = None  # None -> ceil(C'/16)
    conv_kernel: int = 7
    gate_mode: GateMode = GateMode.GATE_BC
    conv_placement: ConvPlacement = ConvPlacement.POST_SPLIT
    expand: int = 2
    chunk_size: int = 16

    def __post_init__(self):
        object.__setattr__(self, "gate_mode", _enum(GateMode, self.gate_mode, "gate_mode"))
        object.__setattr__(self, "conv_placement", _enum(ConvPlacement, self.conv_placement, "conv_placement"))
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise InvalidConfig(f"conv_kernel must be a positive odd integer, got {self.conv_kernel}")
        if self.d_state < 1:
            raise InvalidConfig(f"d_state must be >= 1, got {self.d_state}")
        if self.dt_rank is not None and self.dt_rank < 1:
            raise InvalidConfig(f"dt_rank must be >= 1, got {self.dt_rank}")
        if self.expand < 1 or self.chunk_size < 1:
            raise InvalidConfig("expand and chunk_size must be >= 1")

    def resolved_dt_rank(self, stream_channels):
        return self.dt_rank if self.dt_rank is not None else math.ceil(stream_channels / 16)


@dataclass(frozen=True)
class ModelConfig:
    groups: int = 6
    units_per_group: int = 2
    patch_size: int = 2
    channels: int = 64
    scan: ScanConfig = field(default_factory=ScanConfig)
    use_hifi_mamba: bool = True
    use_dsfa: bool = True
    use_crm: bool = True
    dsfa_reduction: int = 4

    def __post_init__(self):
        if isinstance(self.scan, dict):
            object.__setattr__(self, "scan", _build(ScanConfig, self.scan, "model.scan"))
        if self.patch_size not in (1, 2, 4):
            raise InvalidConfig(f"patch_size must be one of 1, 2, 4, got {self.patch_size}")
        if self.channels < 2 or self.channels % 2:
            raise InvalidConfig(f"channels must be even and >= 2, got {self.channels}")
        if self.groups < 1 or self.units_per_group < 1:
            raise InvalidConfig("groups and units_per_group must be >= 1")
        if self.dsfa_reduction < 1:
            raise InvalidConfig("dsfa_reduction must be >= 1")

    @property
    def stream_channels(self):
        return self.channels // 2


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    warmup_epochs: int = 5
    epochs: int = 100
    batch_size: int = 4
    seed: int = 0
    af: int = 4
    center_fraction: float = 0.08
    loss: str = "l1"
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    val_fraction: float = 0.1
    device: str = DEFAULT_DEVICE

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.lr <= 0:
            raise InvalidConfig(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise InvalidConfig(f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if self.loss != "l1":
            raise InvalidConfig(f"unsupported loss '{self.loss}'")
        if not 0 < self.val_fraction < 1:
            raise InvalidConfig("val_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class DataConfig:
    source: str = "phantom"  # phantom | fastmri
    n: int = 100
    size: int = 64
    seed: int = 0
    mask_seed: int = 0
    path: str = ""
    slice_trim: int = FASTMRI_SLICE_TRIM
    crop_size: int = FASTMRI_CROP

    def __post_init__(self):
        if self.source not in ("phantom", "fastmri"):
            raise InvalidConfig(f"data.source must be 'phantom' or 'fastmri', got '{self.source}'")
        if self.source == "phantom" and (self.size < 32 or self.size % 2):
            raise InvalidConfig(f"phantom size must be even and >= 32, got {self.size}")
        if self.n < 1:
            raise InvalidConfig("data.n must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self):
        return to_plain_dict(self)

    @classmethod
    def from_dict(cls, table):
        unknown = set(table) - {"data", "model", "train"}
        if unknown:
            raise InvalidConfig(f"unknown config sections: {sorted(unknown)}")
        return cls(
            data=_build(DataConfig, table.get("data", {}), "data"),
            model=_build(ModelConfig, table.get("model", {}), "model"),
            train=_build(TrainConfig, table.get("train", {}), "train"),
        )

    def with_overrides(self, seed=None, af=None, patch=None, device=None):
        cfg = self
        if seed is not None:
            cfg = replace(cfg, train=replace(cfg.train, seed=seed), data=replace(cfg.data, seed=seed))
        if af is not None:
            cf = CENTER_FRACTIONS.get(af, cfg.train.center_fraction)
            cfg = replace(cfg, train=replace(cfg.train, af=af, center_fraction=cf))
        if patch is not None:
            cfg = replace(cfg, model=replace(cfg.model, patch_size=patch))
        if device is not None:
            cfg = replace(cfg, train=replace(cfg.train, device=device))
        return cfg


def load_config(path):
    """Reads a TOML run config; missing sections fall back to defaults."""
    try:
        with open(path, "rb") as f:
            table = tomllib.load(f)
    except FileNotFoundError as e:
        raise InvalidConfig(f"config file not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise InvalidConfig(f"malformed TOML in {path}: {e}") from e
    return RunConfig.from_dict(table)


def model_config_from_dict(table):
    return _build(ModelConfig, table, "model")


def to_plain_dict(cfg):
    """Dataclass config -> JSON-ready dict (enums as values, tuples as lists)."""
    return _plain(asdict(cfg))


def _build(cls, table, section):
    if isinstance(table, cls):
        return table
    names = {f.name for f in fields(cls)}
    unknown = set(table) - names
    if unknown:
        raise InvalidConfig(f"unknown keys in [{section}]: {sorted(unknown)}")
    try:
        return cls(**table)
    except TypeError as e:
        raise InvalidConfig(f"invalid [{section}] table: {e}") from e


def _enum(enum_cls, value, name):
    try:
        return enum_cls(value)
    except ValueError as e:
        choices = ", ".join(m.value for m in enum_cls)
        raise InvalidConfig(f"{name} must be one of {choices}, got '{value}'") from e


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, Enum):
        return obj.value
    return obj
