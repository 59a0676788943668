"""
Building blocks of the Mamba Unit.

All feature maps are channel-last ``(B, H', W', C)``; convolutions permute to
channels-first internally.
"""

import logging
from dataclasses import replace

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .config import ModelConfig, ScanConfig
from .errors import OddSpatialDim, ShapeMismatch
from .ssm_core import GuidanceGate, ParamGenerator, SpatialRefiner, condition, selective_scan
from .wavelet import HaarDWT, wl_decompose

logger = logging.getLogger(__name__)


def _zero_(layer):
    with torch.no_grad():
        layer.weight.zero_()
        if layer.bias is not None:
            layer.bias.zero_()


class CRM(nn.Module):
    """
    Cross-resolution refinement: a down-up depthwise bottleneck with a residual.

    pw 1x1 (C->2C) -> dw 3x3 -> GELU -> dw 3x3 stride 2 -> GELU
    -> bilinear x2 -> pw 1x1 (2C->C) -> + input
    """

    def __init__(self, channels):
        super().__init__()
        hidden = 2 * channels
        self.pw1 = nn.Conv2d(channels, hidden, 1)
        self.dw = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.down = nn.Conv2d(hidden, hidden, 3, stride=2, padding=1, groups=hidden)
        self.pw2 = nn.Conv2d(hidden, channels, 1)
        self.act = nn.GELU()

    def zero_residual_(self):
        _zero_(self.pw2)

    def forward(self, x):
        h, w = x.shape[1], x.shape[2]
        if h % 2 or w % 2:
            raise OddSpatialDim(f"CRM needs even spatial dims, got {h}x{w}")
        y = rearrange(x, "b h w c -> b c h w")
        y = self.act(self.dw(self.pw1(y)))
        y = self.act(self.down(y))
        y = F.interpolate(y, size=(h, w), mode="bilinear", align_corners=False)
        y = self.pw2(y)
        return x + rearrange(y, "b c h w -> b h w c")


class WLBlock(nn.Module):
    """CRM refinement followed by the W-Laplacian low/high split."""

    def __init__(self, channels, use_crm=True):
        super().__init__()
        self.crm = CRM(channels) if use_crm else nn.Identity()
        self.dwt = HaarDWT()

    def forward(self, f1):
        return wl_decompose(self.crm(f1), self.dwt)


class HiFiMambaBlock(nn.Module):
    """Guidance-conditioned selective scan over the low-frequency stream."""

    def __init__(self, stream_channels, cfg: ScanConfig):
        super().__init__()
        self.cfg = cfg
        self.params = ParamGenerator(stream_channels, cfg)
        self.gate = GuidanceGate(stream_channels, cfg)
        self.refiner = SpatialRefiner(stream_channels, cfg)
        self.out_proj = nn.Linear(self.params.d_inner, stream_channels, bias=True)

    def zero_residual_(self):
        _zero_(self.out_proj)

    def forward(self, f_low, guidance=None):
        b, h, w, c = f_low.shape
        seq = rearrange(f_low, "b h w c -> b (h w) c")
        f_conv, z, params = self.params(seq, (h, w))
        if guidance is not None:
            if guidance.shape != f_low.shape:
                raise ShapeMismatch(f"guidance {tuple(guidance.shape)} vs low stream {tuple(f_low.shape)}")
            g_seq = rearrange(guidance, "b h w c -> b (h w) c")
            params = condition(params, self.gate(g_seq, (h, w)))
        params = self.refiner(params)
        y = selective_scan(f_conv, params, chunk_size=self.cfg.chunk_size)
        out = self.out_proj(y * F.silu(z))
        return rearrange(out, "b (h w) c -> b h w c", h=h, w=w)


class DSFA(nn.Module):
    """
    Dual-stream fusion: concat -> channel attention (squeeze, bottleneck,
    sigmoid) -> reweight -> pointwise projection. With ``attention=False`` the
    reweighting is skipped and only the projection remains.
    """

    def __init__(self, channels, reduction=4, attention=True):
        super().__init__()
        self.channels = channels
        self.attention = attention
        if attention:
            hidden = max(channels // reduction, 1)
            self.fc1 = nn.Linear(channels, hidden)
            self.fc2 = nn.Linear(hidden, channels)
        self.proj = nn.Linear(channels, channels)

    def zero_residual_(self):
        _zero_(self.proj)

    def channel_weights(self, x):
        squeezed = x.mean(dim=(1, 2))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(squeezed))))

    def forward(self, low, high):
        if low.shape != high.shape or low.shape[-1] * 2 != self.channels:
            raise ShapeMismatch(
                f"DSFA expects two (B, H, W, {self.channels // 2}) streams, "
                f"got {tuple(low.shape)} and {tuple(high.shape)}"
            )
        x = torch.cat([low, high], dim=-1)
        if self.attention:
            x = x * self.channel_weights(x)[:, None, None, :]
        return self.proj(x)


class MambaUnit(nn.Module):
    """
    split -> (F_low, F_high') = WL(F1); F_high = F2 + F_high'; G = CRM(F_high);
    high~ = CRM(G); low~ = HiFiMamba(F_low | G); out = DSFA(low~, high~) + F_in
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c_half = cfg.stream_channels
        self.wl = WLBlock(c_half, use_crm=cfg.use_crm)
        self.crm_guide = CRM(c_half) if cfg.use_crm else nn.Identity()
        self.crm_high = CRM(c_half) if cfg.use_crm else nn.Identity()
        self.hifi = HiFiMambaBlock(c_half, cfg.scan) if cfg.use_hifi_mamba else None
        self.fusion = DSFA(cfg.channels, cfg.dsfa_reduction, attention=cfg.use_dsfa)

    def zero_residual_(self):
        """Zero every branch's final projection; the unit becomes the identity."""
        self.fusion.zero_residual_()
        for crm in (self.wl.crm, self.crm_guide, self.crm_high):
            if isinstance(crm, CRM):
                crm.zero_residual_()
        if self.hifi is not None:
            self.hifi.zero_residual_()

    def forward(self, f_in):
        if f_in.shape[-1] != self.cfg.channels:
            raise ShapeMismatch(f"expected {self.cfg.channels} channels, got {f_in.shape[-1]}")
        c_half = self.cfg.stream_channels
        f1, f2 = f_in[..., :c_half], f_in[..., c_half:]
        split = self.wl(f1)
        f_high = f2 + split.high
        guide = self.crm_guide(f_high)
        high_t = self.crm_high(guide)
        low_t = self.hifi(split.low, guide) if self.hifi is not None else split.low
        return self.fusion(low_t, high_t) + f_in


def component_variants(cfg: ModelConfig):
    """Component-ablation rows, from the bare W-Laplacian baseline to the full unit."""
    return {
        "wl_only": replace(cfg, use_hifi_mamba=False, use_dsfa=False, use_crm=False),
        "+hifi_mamba": replace(cfg, use_hifi_mamba=True, use_dsfa=False, use_crm=False),
        "+dsfa": replace(cfg, use_hifi_mamba=True, use_dsfa=True, use_crm=False),
        "+crm": replace(cfg, use_hifi_mamba=True, use_dsfa=True, use_crm=True),
    }
