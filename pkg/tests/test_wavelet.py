import math

import pytest
import torch
from torch.autograd import gradcheck

from src.errors import OddDimension
from src.wavelet import HaarDWT, Subbands, dwt2, idwt2, upsample_ll, wl_decompose


def _band_energy_ratio(x, radius=0.25):
    """Share of spectral energy with normalized frequency |f| < radius, per map."""
    power = torch.fft.fftshift(torch.fft.fft2(x, dim=(-3, -2)), dim=(-3, -2)).abs() ** 2
    h, w = x.shape[-3], x.shape[-2]
    fy = torch.fft.fftshift(torch.fft.fftfreq(h, dtype=x.dtype))
    fx = torch.fft.fftshift(torch.fft.fftfreq(w, dtype=x.dtype))
    inside = (fy[:, None] ** 2 + fx[None, :] ** 2).sqrt() < radius
    return float((power * inside[:, :, None]).sum() / power.sum())


def test_dwt_perfect_reconstruction():
    for seed in range(50):
        g = torch.Generator().manual_seed(seed)
        x = torch.randn(2, 16, 12, 3, generator=g, dtype=torch.float64)
        assert (idwt2(dwt2(x)) - x).abs().max() <= 1e-6


def test_dwt_is_orthonormal():
    x = torch.randn(1, 8, 8, 4, dtype=torch.float64)
    bands = dwt2(x)
    assert bands.ll.shape == (1, 4, 4, 4)
    assert torch.allclose(bands.energy(), (x ** 2).sum())


def test_dwt_of_constant_has_only_ll():
    x = torch.full((1, 8, 8, 2), 1.5, dtype=torch.float64)
    bands = dwt2(x)
    assert torch.allclose(bands.ll, torch.full_like(bands.ll, 3.0))
    for band in (bands.lh, bands.hl, bands.hh):
        assert band.abs().max() < 1e-12


def test_dwt_odd_dimension():
    with pytest.raises(OddDimension):
        dwt2(torch.zeros(1, 7, 8, 2))


def test_upsample_ll_keeps_constants():
    ll = torch.full((1, 4, 4, 3), 2.0)
    assert torch.allclose(upsample_ll(ll), torch.full((1, 8, 8, 3), 1.0))


def test_wl_decompose_residual_identity():
    x = torch.randn(2, 16, 16, 4)
    pair = wl_decompose(x, HaarDWT())
    assert (pair.low + pair.high - x).abs().max() <= 1e-6


def test_wl_decompose_constant_has_no_high():
    x = torch.full((1, 8, 8, 2), 0.7)
    pair = wl_decompose(x)
    assert pair.high.abs().max() < 1e-6


def test_wl_low_branch_concentrates_low_frequencies():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(4, 64, 64, 1, generator=g, dtype=torch.float64)
    pair = wl_decompose(x)
    low_ratio = _band_energy_ratio(pair.low)
    high_ratio = _band_energy_ratio(pair.high)
    assert low_ratio >= high_ratio
    assert low_ratio > 0.7


def test_wl_decompose_supports_unbatched_maps():
    x = torch.randn(8, 8, 2)
    pair = wl_decompose(x)
    assert pair.low.shape == x.shape


def _random_maps(seed, shape=(2, 8, 12, 3)):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64)


def test_dwt_and_wl_decompose_are_linear():
    x, y = _random_maps(0), _random_maps(1)
    alpha, beta = 0.7, -2.5
    mixed = dwt2(alpha * x + beta * y)
    bx, by = dwt2(x), dwt2(y)
    for name in ("ll", "lh", "hl", "hh"):
        expected = alpha * getattr(bx, name) + beta * getattr(by, name)
        assert torch.allclose(getattr(mixed, name), expected, atol=1e-12)
    pair = wl_decompose(alpha * x + beta * y)
    px, py = wl_decompose(x), wl_decompose(y)
    assert torch.allclose(pair.low, alpha * px.low + beta * py.low, atol=1e-12)
    assert torch.allclose(pair.high, alpha * px.high + beta * py.high, atol=1e-12)


def test_wl_decompose_gradcheck():
    x = _random_maps(2, shape=(1, 4, 4, 2)).requires_grad_()
    dwt = HaarDWT().to(x)

    def split(t):
        pair = wl_decompose(t, dwt)
        return pair.low, pair.high

    assert gradcheck(split, (x,), eps=1e-6, atol=1e-6)


def test_checkerboard_energy_lands_in_hh():
    i, j = torch.meshgrid(torch.arange(4), torch.arange(4), indexing="ij")
    board = ((-1.0) ** (i + j)).to(torch.float64)[None, :, :, None]
    bands = dwt2(board)

    # 2x2 block filters [[a, b], [c, d]] -> LL (a+b+c+d)/2, HH (a-b-c+d)/2
    a, b = board[0, 0::2, 0::2, 0], board[0, 0::2, 1::2, 0]
    c, d = board[0, 1::2, 0::2, 0], board[0, 1::2, 1::2, 0]
    assert torch.allclose(bands.ll[0, :, :, 0], (a + b + c + d) / 2, atol=1e-12)
    assert torch.allclose(bands.hh[0, :, :, 0].abs(), ((a - b - c + d) / 2).abs(), atol=1e-12)
    for band in (bands.ll, bands.lh, bands.hl):
        assert band.abs().max() < 1e-12
    assert (bands.hh ** 2).sum() == pytest.approx(16.0)


def test_upsample_ll_halves_the_mean():
    ll = _random_maps(3, shape=(2, 5, 7, 3))
    up = upsample_ll(ll)
    assert up.shape == (2, 10, 14, 3)
    assert torch.allclose(up.mean(dim=(1, 2)), ll.mean(dim=(1, 2)) / 2, atol=1e-12)


def test_smooth_image_low_branch_matches_ideal_low_pass():
    size = 64
    i, j = torch.meshgrid(torch.arange(size, dtype=torch.float64), torch.arange(size, dtype=torch.float64), indexing="ij")
    smooth = 1.0 + torch.sin(2 * math.pi * i / size) + 0.5 * torch.cos(2 * math.pi * j / size)
    x = smooth[None, :, :, None]

    # ideal low-pass: keep normalized frequencies inside the half band
    spectrum = torch.fft.fft2(smooth)
    fy = torch.fft.fftfreq(size, dtype=torch.float64)
    inside = (fy[:, None] ** 2 + fy[None, :] ** 2).sqrt() < 0.25
    oracle = torch.fft.ifft2(spectrum * inside).real

    low = wl_decompose(x).low[0, :, :, 0]
    assert torch.linalg.norm(low - oracle) / torch.linalg.norm(oracle) < 0.05


def test_idwt_of_zero_detail_bands_is_smooth():
    ll = _random_maps(4, shape=(1, 4, 4, 2))
    zeros = torch.zeros_like(ll)
    img = idwt2(Subbands(ll=ll, lh=zeros, hl=zeros, hh=zeros))
    # every 2x2 block is constant ll / 2
    assert torch.allclose(img[:, 0::2, 0::2], ll / 2, atol=1e-12)
    assert torch.allclose(img[:, 1::2, 1::2], ll / 2, atol=1e-12)
    assert torch.equal(idwt2(Subbands(zeros, zeros, zeros, zeros)), torch.zeros(1, 8, 8, 2, dtype=torch.float64))


def test_idwt_preserves_energy_of_random_subbands():
    bands = Subbands(*(_random_maps(10 + k, shape=(2, 6, 5, 3)) for k in range(4)))
    img = idwt2(bands)
    assert img.shape == (2, 12, 10, 3)
    assert torch.allclose((img ** 2).sum(), bands.energy(), rtol=1e-10)
