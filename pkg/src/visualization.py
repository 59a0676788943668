import logging
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from . import config
from .metrics import to_magnitude_array

logger = logging.getLogger(__name__)


def save_magnitude_png(path, img):
    """Linear [0, 1] grayscale preview; one pixel per image sample."""
    mag = to_magnitude_array(img)
    plt.imsave(path, np.clip(mag, 0.0, 1.0), cmap="gray", vmin=0.0, vmax=1.0)
    return path


def error_map(pred, gt, vmax=config.ERROR_MAP_MAX):
    return np.clip(np.abs(to_magnitude_array(pred) - to_magnitude_array(gt)), 0.0, vmax)


def save_error_png(path, pred, gt, vmax=config.ERROR_MAP_MAX):
    plt.imsave(path, error_map(pred, gt, vmax), cmap="jet", vmin=0.0, vmax=vmax)
    return path


def save_reconstruction(out_dir, slice_id, pred, gt=None, zero_filled=None):
    """
    Writes the raw prediction (.npy) and magnitude previews for one slice, plus
    |pred - gt| clipped to [0, ERROR_MAP_MAX] when a reference is available.
    """
    os.makedirs(out_dir, exist_ok=True)
    written = {}
    raw = os.path.join(out_dir, f"{slice_id}_recon.npy")
    np.save(raw, pred.detach().cpu().numpy().astype(np.float32))
    written["raw"] = raw
    written["recon_png"] = save_magnitude_png(os.path.join(out_dir, f"{slice_id}_recon.png"), pred)
    if zero_filled is not None:
        written["zf_png"] = save_magnitude_png(os.path.join(out_dir, f"{slice_id}_zf.png"), zero_filled)
    if gt is not None:
        err = error_map(pred, gt)
        err_raw = os.path.join(out_dir, f"{slice_id}_error.npy")
        np.save(err_raw, err.astype(np.float32))
        written["error"] = err_raw
        written["error_png"] = save_error_png(os.path.join(out_dir, f"{slice_id}_error.png"), pred, gt)
    logger.debug(f"Saved reconstruction previews for {slice_id}")
    return written


def ablation_table(rows, columns, default_name=None):
    """
    Markdown table, one row per configuration. ``rows`` are dicts keyed by
    ``columns``; the default configuration gets a trailing marker.
    """
    header = "| " + " | ".join(columns) + " |"
    rule = "| " + " | ".join("---" for _ in columns) + " |"
    lines = [header, rule]
    for row in rows:
        cells = []
        for col in columns:
            value = row.get(col, "")
            cells.append(f"{value:.4f}" if isinstance(value, float) else str(value))
        if default_name is not None and row.get("name") == default_name:
            cells[0] = f"{cells[0]} (default)"
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
