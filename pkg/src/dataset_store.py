import json
import logging
import os
import shutil

import numpy as np
import torch

from . import config
from .data import SliceSample, phantom_dataset
from .errors import CorruptFile, MissingDataset
from .kspace_sim import SamplingMask, undersample
from .utils import atomic_write_text, short_hash

logger = logging.getLogger(__name__)

INDEX_FILE = "index.json"
SLICE_DIR = "slices"


def save_dataset(directory, samples, mask, source, seed):
    """Writes index.json, mask.csv/json and one float32 ``(H, W, 2)`` .npy per slice."""
    os.makedirs(os.path.join(directory, SLICE_DIR), exist_ok=True)
    mask.save(directory)
    entries = []
    for s in samples:
        rel = f"{SLICE_DIR}/{s.slice_id}.npy"
        np.save(os.path.join(directory, rel), s.target.detach().cpu().numpy().astype(np.float32))
        entries.append({"slice_id": s.slice_id, "file": rel, "shape": list(s.target.shape)})
    index = {"source": source, "seed": seed, "mask_digest": mask.digest(), "slices": entries}
    atomic_write_text(os.path.join(directory, INDEX_FILE), json.dumps(index, indent=2, sort_keys=True) + "\n")
    logger.info(f"Dataset saved: {directory} ({len(samples)} slices)")
    return directory


def load_dataset(directory):
    """Returns ``(samples, mask, index)``; k-space is re-simulated from each stored target."""
    index_path = os.path.join(directory, INDEX_FILE)
    if not os.path.isfile(index_path):
        raise MissingDataset(f"no dataset at {directory} (missing {INDEX_FILE})")
    try:
        with open(index_path) as f:
            index = json.load(f)
        mask = SamplingMask.load(directory)
    except (OSError, ValueError, KeyError) as e:
        raise CorruptFile(f"unreadable dataset index in {directory}: {e}") from e

    samples = []
    for entry in index["slices"]:
        path = os.path.join(directory, entry["file"])
        try:
            target = torch.from_numpy(np.load(path))
        except (OSError, ValueError) as e:
            raise CorruptFile(f"unreadable slice {path}: {e}") from e
        if list(target.shape) != entry["shape"]:
            raise CorruptFile(f"slice {entry['slice_id']} has shape {list(target.shape)}, index says {entry['shape']}")
        zero_filled, ksp = undersample(target, mask)
        samples.append(SliceSample(target=target, zero_filled=zero_filled, ksp=ksp, slice_id=entry["slice_id"]))
    logger.info(f"Loaded {len(samples)} slices from {directory}")
    return samples, mask, index


class SmartDatasetCache:
    """Simulated phantom datasets kept on disk, keyed by their simulation parameters."""

    def __init__(self, cache_dir=None, max_datasets=config.MAX_CACHED_DATASETS):
        self.cache_dir = cache_dir or config.CACHE_DIR
        self.max_datasets = max_datasets
        os.makedirs(self.cache_dir, exist_ok=True)

    def get_key(self, n, size, seed, mask):
        return short_hash(f"phantom|n={n}|size={size}|seed={seed}|mask={mask.digest()}")

    def get_phantoms(self, n, size, seed, mask):
        """Get cached phantoms or simulate them if this parameter set is new."""
        entry = os.path.join(self.cache_dir, self.get_key(n, size, seed, mask))

        if os.path.isfile(os.path.join(entry, INDEX_FILE)):
            try:
                samples, _, _ = load_dataset(entry)
                logger.info(f"Loaded cached phantoms from {entry}")
                return samples
            except (CorruptFile, MissingDataset) as e:
                logger.error(f"Error loading cached dataset, regenerating: {e}")
                shutil.rmtree(entry, ignore_errors=True)

        samples = phantom_dataset(n, size, seed, mask)
        try:
            save_dataset(entry, samples, mask, "phantom", seed)
            self.cleanup_old_entries()
        except OSError as e:
            logger.error(f"Error saving dataset cache: {e}")
        return samples

    def cleanup_old_entries(self):
        entries = []
        for name in os.listdir(self.cache_dir):
            path = os.path.join(self.cache_dir, name)
            if os.path.isdir(path):
                entries.append((path, os.path.getmtime(path)))

        # oldest first
        entries.sort(key=lambda x: x[1])
        while len(entries) > self.max_datasets:
            oldest = entries.pop(0)[0]
            shutil.rmtree(oldest, ignore_errors=True)
            logger.info(f"Removed old cache entry: {oldest}")
