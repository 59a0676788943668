"""
PSNR / SSIM / NMSE on magnitude images, and the per-slice ReconReport.
"""

import csv
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from .config import PSNR_CAP_DB, SSIM_K1, SSIM_K2, SSIM_WINDOW
from .errors import ImageTooSmall, ShapeMismatch, ZeroReference
from .kspace_sim import magnitude
from .utils import atomic_write_text

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ("slice_id", "psnr", "ssim", "nmse")


def to_magnitude_array(img):
    """Tensor or array -> float64 numpy; two-channel ``(H, W, 2)`` inputs become |img|."""
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu()
        if img.ndim >= 3 and img.shape[-1] == 2:
            img = magnitude(img)
        return img.double().numpy()
    return np.asarray(img, dtype=np.float64)


def _pair(pred, gt):
    p, g = to_magnitude_array(pred), to_magnitude_array(gt)
    if p.shape != g.shape:
        raise ShapeMismatch(f"prediction {p.shape} vs reference {g.shape}")
    return p, g


def psnr(pred, gt, data_range=1.0):
    p, g = _pair(pred, gt)
    if np.mean((p - g) ** 2) == 0:
        return PSNR_CAP_DB
    return float(peak_signal_noise_ratio(g, p, data_range=data_range))


def ssim(pred, gt, data_range=1.0):
    p, g = _pair(pred, gt)
    if min(p.shape[-2:]) < SSIM_WINDOW:
        raise ImageTooSmall(f"SSIM needs both dims >= {SSIM_WINDOW}, got {p.shape}")
    return float(structural_similarity(
        g, p,
        win_size=SSIM_WINDOW,
        K1=SSIM_K1,
        K2=SSIM_K2,
        gaussian_weights=False,
        use_sample_covariance=True,
        data_range=data_range,
    ))


def nmse(pred, gt):
    p, g = _pair(pred, gt)
    ref = np.sum(g ** 2)
    if ref == 0:
        raise ZeroReference("NMSE is undefined for an all-zero reference")
    return float(np.sum((p - g) ** 2) / ref)


@dataclass
class SliceMetrics:
    slice_id: str
    psnr: float
    ssim: float
    nmse: float


@dataclass
class ReconReport:
    per_slice: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, slice_id, pred, gt):
        row = SliceMetrics(slice_id, psnr(pred, gt), ssim(pred, gt), nmse(pred, gt))
        self.per_slice.append(row)
        return row

    @property
    def aggregate(self):
        if not self.per_slice:
            return {name: float("nan") for name in REPORT_COLUMNS[1:]}
        return {
            name: float(np.mean([getattr(r, name) for r in self.per_slice]))
            for name in REPORT_COLUMNS[1:]
        }

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for r in self.per_slice:
            writer.writerow([r.slice_id, repr(r.psnr), repr(r.ssim), repr(r.nmse)])
        return buf.getvalue()

    def write(self, path):
        """Per-slice CSV at ``path`` plus a JSON sidecar with the aggregate and meta."""
        atomic_write_text(path, self.to_csv())
        sidecar = os.path.splitext(path)[0] + ".json"
        payload = {"aggregate": self.aggregate, "meta": self.meta, "num_slices": len(self.per_slice)}
        atomic_write_text(sidecar, json.dumps(payload, indent=2, sort_keys=True) + "\n")
        logger.info(f"Report written: {path} ({len(self.per_slice)} slices)")
        return path, sidecar

    @classmethod
    def read(cls, path):
        with open(path, newline="") as f:
            rows = [
                SliceMetrics(r["slice_id"], float(r["psnr"]), float(r["ssim"]), float(r["nmse"]))
                for r in csv.DictReader(f)
            ]
        sidecar = os.path.splitext(path)[0] + ".json"
        meta = {}
        if os.path.exists(sidecar):
            with open(sidecar) as f:
                meta = json.load(f).get("meta", {})
        return cls(per_slice=rows, meta=meta)

    def rows(self):
        return [asdict(r) for r in self.per_slice]
