"""
Slice sources: randomized ellipse phantoms and fastMRI-style HDF5 volumes.
"""

import logging
import os
from dataclasses import dataclass

import h5py
import numpy as np
import torch
from skimage.draw import ellipse
from torch.utils.data import Dataset

from .errors import ConstantImage, CorruptFile, EmptyVolume, MissingDataset, ShapeMismatch
from .kspace_sim import KSpace, ifft2c, magnitude, normalize_minmax, to_complex_image, undersample
from .utils import short_hash

logger = logging.getLogger(__name__)

# Arrays tried in order when reading a volume.
VOLUME_KEYS = ("reconstruction_esc", "reconstruction_rss", "kspace")

# Modified Shepp-Logan: (intensity, semi-axis x, semi-axis y, center x, center y, angle deg)
SHEPP_LOGAN = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
)


@dataclass(frozen=True)
class SliceSample:
    target: torch.Tensor  # (H, W, 2), magnitude in [0, 1]
    zero_filled: torch.Tensor  # (H, W, 2)
    ksp: KSpace
    slice_id: str


@dataclass(frozen=True)
class Batch:
    target: torch.Tensor
    zero_filled: torch.Tensor
    ksp: KSpace
    slice_ids: list

    def to(self, device):
        return Batch(self.target.to(device), self.zero_filled.to(device), self.ksp.to(device), self.slice_ids)

    def __len__(self):
        return len(self.slice_ids)


def make_sample(image, mask, slice_id):
    """Real ``(H, W)`` image -> normalized target, zero-filled input and k-space."""
    target = to_complex_image(normalize_minmax(image.float()))
    zero_filled, ksp = undersample(target, mask)
    return SliceSample(target=target, zero_filled=zero_filled, ksp=ksp, slice_id=slice_id)


# --- Phantoms ---

def random_phantom(size, rng):
    """Shepp-Logan layout with jittered ellipse intensities, axes, centers and angles."""
    img = np.zeros((size, size), dtype=np.float64)
    half = size / 2.0
    for i, (value, ax, ay, cx, cy, phi) in enumerate(SHEPP_LOGAN):
        if i > 0:
            value *= rng.uniform(0.7, 1.3)
            ax *= rng.uniform(0.85, 1.15)
            ay *= rng.uniform(0.85, 1.15)
            cx += rng.normal(0.0, 0.02)
            cy += rng.normal(0.0, 0.02)
            phi += rng.uniform(-15.0, 15.0)
        rr, cc = ellipse(
            half * (1.0 - cy), half * (1.0 + cx),
            max(ay * half, 1.0), max(ax * half, 1.0),
            shape=(size, size), rotation=np.deg2rad(phi),
        )
        img[rr, cc] += value
    return np.clip(img, 0.0, None).astype(np.float32)


def phantom_dataset(n, size, seed, mask):
    if size < 32 or size % 2:
        raise ShapeMismatch(f"phantom size must be even and >= 32, got {size}")
    if mask.width != size:
        raise ShapeMismatch(f"mask width {mask.width} does not match phantom size {size}")
    rng = np.random.default_rng(seed)
    samples = [
        make_sample(torch.from_numpy(random_phantom(size, rng)), mask, f"phantom_{seed}_{i:04d}")
        for i in range(n)
    ]
    logger.info(f"Generated {n} phantoms ({size}x{size}, seed {seed}, af {mask.acceleration_factor})")
    return samples


# --- fastMRI-style volumes ---

def center_crop(images, crop_size):
    h, w = images.shape[-2:]
    ch, cw = min(crop_size, h), min(crop_size, w)
    top, left = (h - ch) // 2, (w - cw) // 2
    return images[..., top:top + ch, left:left + cw]


def _read_volume(path):
    try:
        with h5py.File(path, "r") as hf:
            key = next((k for k in VOLUME_KEYS if k in hf), None)
            if key is None:
                raise CorruptFile(f"{path} holds none of {', '.join(VOLUME_KEYS)}")
            return key, hf[key][()]
    except OSError as e:
        raise CorruptFile(f"cannot read HDF5 file {path}: {e}") from e


def _volume_images(key, arr):
    """Slices x H x W real magnitude images from whichever array the file holds."""
    if key != "kspace":
        return torch.from_numpy(np.abs(arr).astype(np.float32))
    ksp = torch.from_numpy(np.asarray(arr)).to(torch.complex64)
    imgs = magnitude(ifft2c(ksp))
    if imgs.ndim == 4:
        # multi-coil: root-sum-of-squares over the coil axis
        imgs = torch.sqrt((imgs ** 2).sum(dim=1))
    return imgs


def ingest_fastmri_volume(path, slice_trim, mask, crop_size=320):
    """Trim ``slice_trim`` slices at both ends, then normalize + undersample each one."""
    if not os.path.isfile(path):
        raise MissingDataset(f"volume not found: {path}")
    key, arr = _read_volume(path)
    if arr.ndim < 3:
        raise CorruptFile(f"{path}:{key} has shape {arr.shape}, expected slices x H x W")

    images = center_crop(_volume_images(key, arr), crop_size)
    num_slices = images.shape[0]
    if 2 * slice_trim >= num_slices:
        raise EmptyVolume(f"trimming {slice_trim} slices per end leaves nothing of {num_slices}")
    if images.shape[-1] != mask.width:
        raise ShapeMismatch(f"image width {images.shape[-1]} does not match mask width {mask.width}")

    stem = os.path.splitext(os.path.basename(path))[0]
    samples = []
    for idx in range(slice_trim, num_slices - slice_trim):
        try:
            samples.append(make_sample(images[idx], mask, f"{stem}_{idx:03d}"))
        except ConstantImage as e:
            logger.warning(f"Skipping slice {idx} of {stem}: {e}")
    if not samples:
        raise EmptyVolume(f"every slice of {path} was degenerate")
    logger.info(f"Ingested {len(samples)}/{num_slices} slices from {stem} ({key}, trim {slice_trim})")
    return samples


def ingest_directory(directory, slice_trim, mask, crop_size=320):
    if not os.path.isdir(directory):
        raise MissingDataset(f"dataset directory not found: {directory}")
    files = sorted(f for f in os.listdir(directory) if f.endswith((".h5", ".hdf5")))
    if not files:
        raise MissingDataset(f"no HDF5 volumes in {directory}")
    samples = []
    for name in files:
        samples.extend(ingest_fastmri_volume(os.path.join(directory, name), slice_trim, mask, crop_size))
    return samples


# --- Batching and splits ---

class SliceDataset(Dataset):
    def __init__(self, samples):
        self.samples = list(samples)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, idx):
        return self.samples[idx]


def collate_samples(items):
    return Batch(
        target=torch.stack([s.target for s in items]),
        zero_filled=torch.stack([s.zero_filled for s in items]),
        ksp=KSpace.stack([s.ksp for s in items]),
        slice_ids=[s.slice_id for s in items],
    )


def is_validation(slice_id, val_fraction):
    return int(short_hash(slice_id, 8), 16) % 1000 < int(round(val_fraction * 1000))


def split_train_val(samples, val_fraction=0.1):
    """Deterministic split by slice-id hash; neither side is ever left empty."""
    train = [s for s in samples if not is_validation(s.slice_id, val_fraction)]
    val = [s for s in samples if is_validation(s.slice_id, val_fraction)]
    if len(samples) < 2:
        raise EmptyVolume(f"need at least 2 slices to split, got {len(samples)}")
    if not val:
        logger.warning("Hash split produced no validation slices; holding out the last training slice")
        val = [train.pop()]
    elif not train:
        logger.warning("Hash split produced no training slices; moving one validation slice back")
        train = [val.pop(0)]
    return train, val
