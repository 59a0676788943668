"""
Single-file checkpoint archive.

A zip with fixed member timestamps holding ``config.json`` (model config, code
version, training state), ``manifest.json`` (tensor name -> shape/dtype plus a
SHA-256 over all blobs) and one raw little-endian blob per tensor under
``model/`` and ``optimizer/``. Identical weights give byte-identical archives.
"""

import hashlib
import io
import json
import logging
import zipfile
from dataclasses import dataclass, field

import numpy as np
import torch

from . import __version__
from .config import ModelConfig, model_config_from_dict, to_plain_dict
from .errors import CheckpointMismatch, CorruptFile, MissingDataset
from .utils import atomic_write_bytes

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    model_state: dict
    optimizer_state: dict | None = None
    train_state: dict = field(default_factory=dict)
    checksum: str = ""
    version: str = ""

    @property
    def checkpoint_id(self):
        return self.checksum[:12]


def _tensor_bytes(t):
    arr = t.detach().cpu().contiguous().numpy()
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(), arr.dtype.name


def _tensor_from_bytes(buf, dtype, shape):
    arr = np.frombuffer(buf, dtype=np.dtype(dtype).newbyteorder("<")).reshape(shape)
    return torch.from_numpy(arr.astype(np.dtype(dtype)))


def _flatten_optimizer(state_dict):
    tensors, scalars = {}, {}
    for pid, slots in state_dict["state"].items():
        for key, value in slots.items():
            name = f"optimizer/state/{pid}/{key}"
            if isinstance(value, torch.Tensor):
                tensors[name] = value
            else:
                scalars[name] = value
    return tensors, {"param_groups": state_dict["param_groups"], "scalars": scalars}


def _unflatten_optimizer(tensors, meta):
    state = {}
    items = list(tensors.items()) + list(meta["scalars"].items())
    for name, value in items:
        _, _, pid, key = name.split("/", 3)
        state.setdefault(int(pid), {})[key] = value
    return {"state": state, "param_groups": meta["param_groups"]}


def _write_member(zf, name, data):
    info = zipfile.ZipInfo(name, date_time=ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(path, model, model_cfg, optimizer=None, train_state=None):
    """Atomically writes the archive; returns the content checksum."""
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    opt_meta = None
    if optimizer is not None:
        opt_tensors, opt_meta = _flatten_optimizer(optimizer.state_dict())
        tensors.update(opt_tensors)

    digest = hashlib.sha256()
    blobs, entries = {}, {}
    for name in sorted(tensors):
        data, dtype = _tensor_bytes(tensors[name])
        blobs[name] = data
        entries[name] = {"shape": list(tensors[name].shape), "dtype": dtype}
        digest.update(name.encode())
        digest.update(data)
    checksum = digest.hexdigest()

    cfg_block = {
        "format": FORMAT_VERSION,
        "version": __version__,
        "model": to_plain_dict(model_cfg),
        "optimizer": opt_meta,
        "train_state": train_state or {},
    }
    manifest = {"tensors": entries, "sha256": checksum}

    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _write_member(zf, "config.json", json.dumps(cfg_block, indent=2, sort_keys=True))
        _write_member(zf, "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        for name in sorted(blobs):
            _write_member(zf, name, blobs[name])
    atomic_write_bytes(path, buf.getvalue())
    logger.info(f"Checkpoint saved: {path} (sha256 {checksum[:12]})")
    return checksum


def load_checkpoint(path, expected_cfg=None):
    try:
        zf = zipfile.ZipFile(path)
    except FileNotFoundError as e:
        raise MissingDataset(f"checkpoint not found: {path}") from e
    except zipfile.BadZipFile as e:
        raise CorruptFile(f"{path} is not a checkpoint archive: {e}") from e

    with zf:
        try:
            cfg_block = json.loads(zf.read("config.json"))
            manifest = json.loads(zf.read("manifest.json"))
        except (KeyError, ValueError) as e:
            raise CorruptFile(f"{path} is missing its config or manifest: {e}") from e

        digest = hashlib.sha256()
        tensors = {}
        for name in sorted(manifest["tensors"]):
            entry = manifest["tensors"][name]
            try:
                data = zf.read(name)
            except KeyError as e:
                raise CorruptFile(f"{path} is missing blob {name}") from e
            digest.update(name.encode())
            digest.update(data)
            try:
                tensors[name] = _tensor_from_bytes(data, entry["dtype"], entry["shape"])
            except ValueError as e:
                raise CorruptFile(f"blob {name} does not match its manifest entry: {e}") from e

    if digest.hexdigest() != manifest["sha256"]:
        raise CorruptFile(f"checksum mismatch in {path}")

    model_cfg = model_config_from_dict(cfg_block["model"])
    if expected_cfg is not None and to_plain_dict(expected_cfg) != to_plain_dict(model_cfg):
        raise CheckpointMismatch(
            f"checkpoint {path} was trained with {to_plain_dict(model_cfg)}, "
            f"run config asks for {to_plain_dict(expected_cfg)}"
        )

    model_state = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    optimizer_state = None
    if cfg_block.get("optimizer") is not None:
        opt_tensors = {k: v for k, v in tensors.items() if k.startswith("optimizer/")}
        optimizer_state = _unflatten_optimizer(opt_tensors, cfg_block["optimizer"])

    return Checkpoint(
        model_cfg=model_cfg,
        model_state=model_state,
        optimizer_state=optimizer_state,
        train_state=cfg_block.get("train_state", {}),
        checksum=manifest["sha256"],
        version=cfg_block.get("version", ""),
    )


def restore_model(ckpt, model):
    try:
        model.load_state_dict(ckpt.model_state, strict=True)
    except RuntimeError as e:
        raise CheckpointMismatch(f"checkpoint weights do not fit the model: {e}") from e
    return model
