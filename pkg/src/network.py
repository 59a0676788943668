"""
Unrolled reconstruction network: patch embedding, K groups of Mamba Units each
closed by an image-space data-consistency step, unpatchify and a final hard DC.
"""

import logging

import torch
import torch.nn as nn
from einops import rearrange

from .blocks import MambaUnit
from .config import ModelConfig
from .errors import IndivisibleShape, ShapeMismatch
from .kspace_sim import apply_dc

logger = logging.getLogger(__name__)


class PatchEmbed(nn.Module):
    """Non-overlapping PxP patches of a two-channel image -> C-channel tokens."""

    def __init__(self, patch_size, channels):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Linear(2 * patch_size * patch_size, channels)

    def forward(self, img):
        p = self.patch_size
        if img.ndim != 4 or img.shape[-1] != 2:
            raise ShapeMismatch(f"expected a (B, H, W, 2) image, got {tuple(img.shape)}")
        h, w = img.shape[1], img.shape[2]
        if h % p or w % p:
            raise IndivisibleShape(f"patch size {p} does not divide {h}x{w}")
        tokens = rearrange(img, "b (h p1) (w p2) c -> b h w (p1 p2 c)", p1=p, p2=p)
        return self.proj(tokens)


class Unpatchify(nn.Module):
    """C-channel tokens -> PxP patches of a two-channel image."""

    def __init__(self, patch_size, channels):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Linear(channels, 2 * patch_size * patch_size)

    @torch.no_grad()
    def init_inverse_(self, embed: PatchEmbed):
        """Pseudo-inverse of ``embed``: W_u = pinv(W_e), b_u = -W_u b_e."""
        w_e, b_e = embed.proj.weight, embed.proj.bias
        w_u = torch.linalg.pinv(w_e.double()).to(w_e.dtype)
        self.proj.weight.copy_(w_u)
        self.proj.bias.copy_(-(w_u @ b_e))

    def forward(self, feats):
        p = self.patch_size
        return rearrange(self.proj(feats), "b h w (p1 p2 c) -> b (h p1) (w p2) c", p1=p, p2=p, c=2)


class ReconGroup(nn.Module):
    """Units in sequence, then unpatchify -> DC -> re-embed with the group's own projections."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.units = nn.ModuleList(MambaUnit(cfg) for _ in range(cfg.units_per_group))
        self.unembed = Unpatchify(cfg.patch_size, cfg.channels)
        self.embed = PatchEmbed(cfg.patch_size, cfg.channels)

    def forward(self, feats, ksp, return_image=False):
        for unit in self.units:
            feats = unit(feats)
        img = apply_dc(self.unembed(feats), ksp)
        out = self.embed(img)
        return (out, img) if return_image else out


class ReconNetwork(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = PatchEmbed(cfg.patch_size, cfg.channels)
        self.groups = nn.ModuleList(ReconGroup(cfg) for _ in range(cfg.groups))
        self.unembed = Unpatchify(cfg.patch_size, cfg.channels)

    def zero_residual_(self):
        for group in self.groups:
            for unit in group.units:
                unit.zero_residual_()

    @torch.no_grad()
    def init_identity_(self):
        """
        Zero every residual branch and tie every embed/unpatchify pair to the
        input embedding and its pseudo-inverse. When C >= 2P^2 the network then
        reproduces apply_dc(zero_filled).
        """
        self.zero_residual_()
        for group in self.groups:
            group.embed.proj.weight.copy_(self.embed.proj.weight)
            group.embed.proj.bias.copy_(self.embed.proj.bias)
            group.unembed.init_inverse_(self.embed)
        self.unembed.init_inverse_(self.embed)

    def forward(self, zero_filled, ksp):
        unbatched = zero_filled.ndim == 3
        if unbatched:
            zero_filled = zero_filled.unsqueeze(0)
        feats = self.embed(zero_filled)
        for group in self.groups:
            feats = group(feats, ksp)
        out = apply_dc(self.unembed(feats), ksp)
        return out.squeeze(0) if unbatched else out


def count_params(cfg: ModelConfig):
    """Number of learned scalars (registered buffers excluded)."""
    model = ReconNetwork(cfg)
    total = sum(p.numel() for p in model.parameters())
    logger.debug(f"ReconNetwork(K={cfg.groups}, P={cfg.patch_size}, C={cfg.channels}) has {total} parameters")
    return total
