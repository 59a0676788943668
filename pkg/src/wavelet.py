"""
Channel-wise one-level Haar DWT and the W-Laplacian low/high split.

Feature tensors are channel-last, ``(..., H, W, C)``. The transform itself is
delegated to pytorch_wavelets (orthonormal Haar, zero mode; for even sizes no
padding is involved, so the bank is exactly orthonormal).
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange
from pytorch_wavelets import DWTForward, DWTInverse

from .errors import OddDimension, ShapeMismatch

# Orthonormal Haar LL carries a gain of 2 on constants.
LL_GAIN = 2.0


@dataclass(frozen=True)
class Subbands:
    ll: torch.Tensor
    lh: torch.Tensor
    hl: torch.Tensor
    hh: torch.Tensor

    def energy(self):
        return sum((b ** 2).sum() for b in (self.ll, self.lh, self.hl, self.hh))


@dataclass(frozen=True)
class FreqPair:
    low: torch.Tensor
    high: torch.Tensor


def _check_even(x):
    if x.ndim < 3:
        raise ShapeMismatch(f"expected a (..., H, W, C) tensor, got {tuple(x.shape)}")
    h, w = x.shape[-3], x.shape[-2]
    if h % 2 or w % 2:
        raise OddDimension(f"DWT needs even spatial dims, got {h}x{w}")


def _to_nchw(x):
    lead = x.shape[:-3]
    return rearrange(x.reshape(-1, *x.shape[-3:]), "n h w c -> n c h w"), lead


def _from_nchw(x, lead):
    x = rearrange(x, "n c h w -> n h w c")
    return x.reshape(*lead, *x.shape[1:])


class HaarDWT(nn.Module):
    """Module form of dwt2 for use inside networks (moves with .to())."""

    def __init__(self):
        super().__init__()
        self.xfm = DWTForward(J=1, wave="haar", mode="zero")

    def forward(self, x):
        _check_even(x)
        x, lead = _to_nchw(x)
        yl, yh = self.xfm(x)
        lh, hl, hh = yh[0].unbind(dim=2)
        return Subbands(*(_from_nchw(b, lead) for b in (yl, lh, hl, hh)))


class HaarIDWT(nn.Module):
    def __init__(self):
        super().__init__()
        self.ifm = DWTInverse(wave="haar", mode="zero")

    def forward(self, s):
        shapes = {tuple(b.shape) for b in (s.ll, s.lh, s.hl, s.hh)}
        if len(shapes) != 1:
            raise ShapeMismatch(f"subbands disagree in shape: {sorted(shapes)}")
        ll, lead = _to_nchw(s.ll)
        highs = torch.stack([_to_nchw(b)[0] for b in (s.lh, s.hl, s.hh)], dim=2)
        return _from_nchw(self.ifm((ll, [highs])), lead)


def dwt2(x):
    return HaarDWT().to(x)(x)


def idwt2(s):
    return HaarIDWT().to(s.ll)(s)


def upsample_ll(ll):
    """Bilinear 2x upsampling with a 1/LL_GAIN gain, so a constant c maps back to c."""
    x, lead = _to_nchw(ll)
    up = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False) / LL_GAIN
    return _from_nchw(up, lead)


def wl_decompose(f, dwt=None):
    """Low = upsampled LL; high = the exact residual, so low + high == f."""
    bands = (dwt or HaarDWT().to(f))(f)
    low = upsample_ll(bands.ll)
    return FreqPair(low=low, high=f - low)
