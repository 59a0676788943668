"""
Undersampled acquisition simulation and the hard data-consistency operator.

Images are two-channel tensors ``(..., H, W, 2)`` holding real and imaginary
parts; k-space is a complex tensor ``(..., H, W)`` with the DC component at the
center (centered, orthonormal FFT). Sampling masks select whole columns.
"""

import json
import logging
import math
import os
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConstantImage, InfeasibleMask, NonFiniteInput, ShapeMismatch
from .utils import atomic_write_text, sha256_bytes

logger = logging.getLogger(__name__)

MASK_CSV = "mask.csv"
MASK_JSON = "mask.json"


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def _check_finite(t, what):
    if not bool(torch.isfinite(t).all()):
        raise NonFiniteInput(f"{what} contains non-finite values")


# --- Complex image helpers ---

def to_complex_image(real_img):
    """Real ``(..., H, W)`` image -> two-channel ``(..., H, W, 2)`` with zero imaginary part."""
    return torch.stack([real_img, torch.zeros_like(real_img)], dim=-1)


def magnitude(img):
    return torch.sqrt(img[..., 0] ** 2 + img[..., 1] ** 2)


def check_complex_image(img):
    if img.ndim < 3 or img.shape[-1] != 2:
        raise ShapeMismatch(f"expected a (..., H, W, 2) image, got {tuple(img.shape)}")
    h, w = img.shape[-3], img.shape[-2]
    if h < 8 or w < 8 or h % 2 or w % 2:
        raise ShapeMismatch(f"image dims must be even and >= 8, got {h}x{w}")


def normalize_minmax(img):
    """Affine rescale of a real image to [0, 1]."""
    _check_finite(img, "image")
    lo, hi = img.min(), img.max()
    if hi == lo:
        raise ConstantImage(f"constant image (value {float(lo)}) cannot be normalized")
    return (img - lo) / (hi - lo)


# --- Centered orthonormal FFT ---

def fft2c(img):
    _check_finite(img, "image")
    if img.shape[-1] != 2:
        raise ShapeMismatch(f"expected a trailing real/imag axis of size 2, got {tuple(img.shape)}")
    x = torch.view_as_complex(img.contiguous())
    x = torch.fft.ifftshift(x, dim=(-2, -1))
    k = torch.fft.fft2(x, norm="ortho")
    return torch.fft.fftshift(k, dim=(-2, -1))


def ifft2c(ksp):
    _check_finite(ksp, "k-space")
    k = torch.fft.ifftshift(ksp, dim=(-2, -1))
    x = torch.fft.ifft2(k, norm="ortho")
    return torch.view_as_real(torch.fft.fftshift(x, dim=(-2, -1)))


# --- Sampling masks ---

@dataclass(frozen=True)
class SamplingMask:
    lines: torch.Tensor  # (W,) float32 of 0/1
    acceleration_factor: int
    center_fraction: float
    seed: int = 0

    @property
    def width(self):
        return int(self.lines.shape[-1])

    @property
    def num_sampled(self):
        return int(self.lines.sum().item())

    def selector(self, device=None):
        """Boolean ``(1, W)`` column selector that broadcasts over rows and batch."""
        return self.lines.to(device=device, dtype=torch.bool).reshape(1, -1)

    def to_csv_line(self):
        return ",".join(str(int(v)) for v in self.lines.tolist())

    def header(self):
        return {
            "W": self.width,
            "af": self.acceleration_factor,
            "center_fraction": self.center_fraction,
            "seed": self.seed,
        }

    def digest(self):
        return sha256_bytes(self.to_csv_line().encode())

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        atomic_write_text(os.path.join(directory, MASK_CSV), self.to_csv_line() + "\n")
        atomic_write_text(os.path.join(directory, MASK_JSON), json.dumps(self.header(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory):
        with open(os.path.join(directory, MASK_JSON)) as f:
            header = json.load(f)
        with open(os.path.join(directory, MASK_CSV)) as f:
            values = [int(v) for v in f.read().strip().split(",")]
        if len(values) != header["W"]:
            raise ShapeMismatch(f"mask.csv has {len(values)} columns, header says {header['W']}")
        return cls(
            lines=torch.tensor(values, dtype=torch.float32),
            acceleration_factor=int(header["af"]),
            center_fraction=float(header["center_fraction"]),
            seed=int(header["seed"]),
        )


def make_equispaced_mask(width, af, center_fraction, seed=0):
    """
    1D Cartesian equispaced mask: a fully sampled center block of
    round(center_fraction*W) columns plus equispaced outer columns so the
    total number of sampled columns is round(W/af). The seed picks the
    phase offset of the outer lattice only.
    """
    if af < 1 or width < af:
        raise InfeasibleMask(f"need 1 <= af <= W, got af={af}, W={width}")
    if not 0 < center_fraction < 1:
        raise InfeasibleMask(f"center_fraction must lie in (0, 1), got {center_fraction}")

    num_low = _round_half_up(center_fraction * width)
    num_total = _round_half_up(width / af)
    if num_low > num_total:
        raise InfeasibleMask(
            f"center block of {num_low} lines exceeds the {num_total} lines allowed at af={af} (W={width})"
        )

    lines = np.zeros(width, dtype=np.float32)
    pad = (width - num_low + 1) // 2
    lines[pad:pad + num_low] = 1.0

    num_outer = num_total - num_low
    if num_outer > 0:
        candidates = np.flatnonzero(lines == 0)
        step = len(candidates) / num_outer
        phase = np.random.default_rng(seed).random() * step
        picks = np.floor(phase + np.arange(num_outer) * step).astype(np.int64)
        lines[candidates[picks]] = 1.0

    logger.debug(f"Equispaced mask W={width} af={af}: {num_low} center + {num_outer} outer lines")
    return SamplingMask(
        lines=torch.from_numpy(lines),
        acceleration_factor=int(af),
        center_fraction=float(center_fraction),
        seed=int(seed),
    )


# --- Acquisition ---

@dataclass(frozen=True)
class KSpace:
    data: torch.Tensor  # complex (..., H, W), fully sampled
    mask: SamplingMask
    measured: torch.Tensor  # data on sampled columns, zero elsewhere

    @classmethod
    def acquire(cls, data, mask):
        if data.shape[-1] != mask.width:
            raise ShapeMismatch(f"k-space width {data.shape[-1]} does not match mask width {mask.width}")
        sel = mask.selector(data.device)
        measured = torch.where(sel, data, torch.zeros_like(data))
        return cls(data=data, mask=mask, measured=measured)

    @classmethod
    def stack(cls, items):
        mask = items[0].mask
        if any(not torch.equal(k.mask.lines, mask.lines) for k in items[1:]):
            raise ShapeMismatch("cannot batch k-space acquired with different masks")
        return cls(
            data=torch.stack([k.data for k in items]),
            mask=mask,
            measured=torch.stack([k.measured for k in items]),
        )

    def to(self, device):
        return KSpace(data=self.data.to(device), mask=self.mask, measured=self.measured.to(device))

    def __len__(self):
        return self.data.shape[0]

    def __getitem__(self, idx):
        return KSpace(data=self.data[idx], mask=self.mask, measured=self.measured[idx])


def undersample(img_full, mask):
    """Returns ``(zero_filled, ksp)`` for a fully sampled two-channel image."""
    check_complex_image(img_full)
    ksp = KSpace.acquire(fft2c(img_full), mask)
    return ifft2c(ksp.measured), ksp


def apply_dc(pred, ksp):
    """Hard data consistency: measured columns replace the prediction's k-space."""
    k = fft2c(pred)
    if k.shape[-2:] != ksp.measured.shape[-2:]:
        raise ShapeMismatch(f"prediction k-space {tuple(k.shape)} vs measured {tuple(ksp.measured.shape)}")
    sel = ksp.mask.selector(k.device)
    return ifft2c(torch.where(sel, ksp.measured.to(device=k.device, dtype=k.dtype), k))
