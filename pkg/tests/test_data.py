import logging
import time

import h5py
import numpy as np
import pytest
import torch

from src.data import (
    SliceDataset,
    collate_samples,
    ingest_directory,
    ingest_fastmri_volume,
    phantom_dataset,
    split_train_val,
)
from src.errors import CorruptFile, EmptyVolume, MissingDataset, ShapeMismatch
from src.kspace_sim import fft2c, make_equispaced_mask, magnitude, to_complex_image


def _write_volume(path, key, arr):
    with h5py.File(path, "w") as hf:
        hf.create_dataset(key, data=arr)
    return str(path)


def _random_volume(slices, size, seed=0):
    return np.random.default_rng(seed).random((slices, size, size)).astype(np.float32) + 0.1


def test_phantoms_are_deterministic(mask32):
    a = phantom_dataset(3, 32, 5, mask32)
    b = phantom_dataset(3, 32, 5, mask32)
    for x, y in zip(a, b):
        assert x.slice_id == y.slice_id
        assert torch.equal(x.target, y.target)
        assert torch.equal(x.zero_filled, y.zero_filled)


def test_phantom_seeds_differ(mask32):
    a = phantom_dataset(1, 32, 0, mask32)[0]
    b = phantom_dataset(1, 32, 1, mask32)[0]
    assert not torch.equal(a.target, b.target)


def test_phantom_sample_invariants(mask32):
    for sample in phantom_dataset(4, 32, 0, mask32):
        mag = magnitude(sample.target)
        assert float(mag.min()) == 0.0 and float(mag.max()) == pytest.approx(1.0)
        assert torch.equal(sample.target[..., 1], torch.zeros(32, 32))
        assert torch.allclose(fft2c(sample.target), sample.ksp.data)
        sel = mask32.lines.bool()
        assert torch.allclose(fft2c(sample.zero_filled)[..., sel], sample.ksp.measured[..., sel], atol=1e-5)
        assert torch.equal(sample.ksp.measured[..., ~sel], torch.zeros_like(sample.ksp.measured[..., ~sel]))


def test_phantom_generation_is_fast():
    mask = make_equispaced_mask(64, 4, 0.08)
    start = time.perf_counter()
    samples = phantom_dataset(100, 64, 0, mask)
    assert len(samples) == 100
    assert time.perf_counter() - start < 10.0


def test_phantom_size_checks(mask32):
    with pytest.raises(ShapeMismatch):
        phantom_dataset(1, 16, 0, make_equispaced_mask(16, 4, 0.08))
    with pytest.raises(ShapeMismatch):
        phantom_dataset(1, 64, 0, mask32)


def test_ingest_trims_slices(tmp_path, mask32):
    path = _write_volume(tmp_path / "vol.h5", "reconstruction_rss", _random_volume(35, 32))
    samples = ingest_fastmri_volume(path, 5, mask32)
    assert len(samples) == 25
    assert samples[0].slice_id == "vol_005"
    assert samples[-1].slice_id == "vol_029"


def test_ingest_prefers_esc_over_rss(tmp_path, mask32):
    path = tmp_path / "both.h5"
    esc = _random_volume(4, 32, seed=1)
    with h5py.File(path, "w") as hf:
        hf.create_dataset("reconstruction_rss", data=_random_volume(4, 32, seed=2))
        hf.create_dataset("reconstruction_esc", data=esc)
    sample = ingest_fastmri_volume(str(path), 0, mask32)[0]
    expected = (esc[0] - esc[0].min()) / (esc[0].max() - esc[0].min())
    assert torch.allclose(sample.target[..., 0], torch.from_numpy(expected), atol=1e-6)


def test_ingest_center_crops(tmp_path):
    mask = make_equispaced_mask(16, 4, 0.08)
    path = _write_volume(tmp_path / "big.h5", "reconstruction_rss", _random_volume(3, 24))
    samples = ingest_fastmri_volume(path, 0, mask, crop_size=16)
    assert samples[0].target.shape == (16, 16, 2)


def test_ingest_trim_too_large(tmp_path, mask32):
    path = _write_volume(tmp_path / "vol.h5", "reconstruction_rss", _random_volume(35, 32))
    with pytest.raises(EmptyVolume):
        ingest_fastmri_volume(path, 18, mask32)


def test_ingest_missing_file(tmp_path, mask32):
    with pytest.raises(MissingDataset):
        ingest_fastmri_volume(str(tmp_path / "nope.h5"), 0, mask32)


def test_ingest_garbage_file(tmp_path, mask32):
    path = tmp_path / "garbage.h5"
    path.write_bytes(b"definitely not hdf5" * 10)
    with pytest.raises(CorruptFile):
        ingest_fastmri_volume(str(path), 0, mask32)


def test_ingest_file_without_known_arrays(tmp_path, mask32):
    path = _write_volume(tmp_path / "other.h5", "something_else", _random_volume(3, 32))
    with pytest.raises(CorruptFile):
        ingest_fastmri_volume(path, 0, mask32)


def test_ingest_multicoil_kspace_uses_rss(tmp_path, mask32):
    images = torch.from_numpy(_random_volume(3, 32, seed=4))
    weights = (0.5, 1.0, 2.0)
    coils = torch.stack([fft2c(to_complex_image(w * images)) for w in weights], dim=1)
    path = _write_volume(tmp_path / "mc.h5", "kspace", coils.numpy())

    samples = ingest_fastmri_volume(path, 0, mask32)
    assert len(samples) == 3
    for img, sample in zip(images, samples):
        expected = (img - img.min()) / (img.max() - img.min())
        assert torch.allclose(sample.target[..., 0], expected, atol=1e-4)


def test_ingest_skips_constant_slices(tmp_path, mask32, caplog):
    vol = _random_volume(5, 32)
    vol[2] = 0.0
    path = _write_volume(tmp_path / "flat.h5", "reconstruction_rss", vol)
    with caplog.at_level(logging.WARNING, logger="src.data"):
        samples = ingest_fastmri_volume(path, 0, mask32)
    assert [s.slice_id for s in samples] == ["flat_000", "flat_001", "flat_003", "flat_004"]
    assert "Skipping slice 2" in caplog.text


def test_ingest_all_constant_volume(tmp_path, mask32):
    path = _write_volume(tmp_path / "zeros.h5", "reconstruction_rss", np.zeros((3, 32, 32), np.float32))
    with pytest.raises(EmptyVolume):
        ingest_fastmri_volume(path, 0, mask32)


def test_ingest_width_mismatch(tmp_path):
    path = _write_volume(tmp_path / "vol.h5", "reconstruction_rss", _random_volume(3, 32))
    with pytest.raises(ShapeMismatch):
        ingest_fastmri_volume(path, 0, make_equispaced_mask(16, 4, 0.08))


def test_ingest_directory(tmp_path, mask32):
    _write_volume(tmp_path / "b.h5", "reconstruction_rss", _random_volume(4, 32, seed=1))
    _write_volume(tmp_path / "a.h5", "reconstruction_rss", _random_volume(3, 32, seed=2))
    samples = ingest_directory(str(tmp_path), 1, mask32)
    assert [s.slice_id for s in samples] == ["a_001", "b_001", "b_002"]


def test_ingest_directory_missing_or_empty(tmp_path, mask32):
    with pytest.raises(MissingDataset):
        ingest_directory(str(tmp_path / "absent"), 0, mask32)
    with pytest.raises(MissingDataset):
        ingest_directory(str(tmp_path), 0, mask32)


def test_collate_batches_samples(mask32):
    samples = phantom_dataset(3, 32, 0, mask32)
    batch = collate_samples([SliceDataset(samples)[i] for i in range(3)])
    assert len(batch) == 3
    assert batch.target.shape == (3, 32, 32, 2)
    assert batch.ksp.measured.shape == (3, 32, 32)
    assert batch.slice_ids == [s.slice_id for s in samples]


def test_split_is_deterministic_and_disjoint(mask32):
    samples = phantom_dataset(20, 32, 0, mask32)
    train, val = split_train_val(samples, 0.25)
    train2, val2 = split_train_val(list(reversed(samples)), 0.25)
    ids = lambda xs: {s.slice_id for s in xs}  # noqa: E731
    assert ids(train) == ids(train2) and ids(val) == ids(val2)
    assert not ids(train) & ids(val)
    assert ids(train) | ids(val) == ids(samples)
    assert train and val


def test_split_never_leaves_a_side_empty(mask32):
    samples = phantom_dataset(2, 32, 0, mask32)
    for fraction in (0.0, 1.0):
        train, val = split_train_val(samples, fraction)
        assert len(train) == 1 and len(val) == 1


def test_split_needs_two_slices(mask32):
    with pytest.raises(EmptyVolume):
        split_train_val(phantom_dataset(1, 32, 0, mask32))
