import math

import pytest
import torch
from dataclasses import replace

from src.config import ModelConfig, ScanConfig
from src.errors import IndivisibleShape
from src.kspace_sim import KSpace, apply_dc, fft2c, make_equispaced_mask, to_complex_image, undersample
from src.network import PatchEmbed, ReconGroup, ReconNetwork, Unpatchify, count_params


def _inputs(n, size, mask, seed=0):
    g = torch.Generator().manual_seed(seed)
    targets = torch.stack([to_complex_image(torch.rand(size, size, generator=g)) for _ in range(n)])
    zf, ksp = undersample(targets, mask)
    return targets, zf, ksp


def test_patch_embed_p1_is_pointwise():
    embed = PatchEmbed(1, 6)
    img = torch.randn(2, 8, 10, 2)
    out = embed(img)
    assert out.shape == (2, 8, 10, 6)
    assert torch.allclose(out[0, 3, 4], embed.proj(img[0, 3, 4]))


def test_patch_embed_full_size_shape():
    out = PatchEmbed(2, 64)(torch.randn(1, 320, 320, 2))
    assert out.shape == (1, 160, 160, 64)


def test_patch_embed_indivisible():
    with pytest.raises(IndivisibleShape):
        PatchEmbed(4, 8)(torch.randn(1, 18, 16, 2))


@pytest.mark.parametrize("p, c", [(1, 8), (2, 8), (2, 16), (4, 32)])
def test_patch_roundtrip_with_inverse_init(p, c):
    embed, unembed = PatchEmbed(p, c), Unpatchify(p, c)
    unembed.init_inverse_(embed)
    img = torch.randn(2, 16, 16, 2)
    assert torch.allclose(unembed(embed(img)), img, atol=1e-5)


def test_unpatchify_zero_features_give_bias_image():
    unembed = Unpatchify(2, 8)
    out = unembed(torch.zeros(1, 3, 5, 8))
    assert out.shape == (1, 6, 10, 2)
    assert torch.allclose(out[0, :2, :2].reshape(-1), unembed.proj.bias)


def _small_cfg(**kw):
    base = dict(groups=1, units_per_group=1, patch_size=2, channels=8, scan=ScanConfig(d_state=4))
    base.update(kw)
    return ModelConfig(**base)


def test_group_with_fully_sampled_kspace_equals_units(full_mask):
    group = ReconGroup(_small_cfg())
    # C == 2P^2, so the pseudo-inverse pair is an exact inverse both ways
    group.unembed.init_inverse_(group.embed)
    feats = torch.randn(2, 8, 8, 8)
    with torch.no_grad():
        units_only = feats
        for unit in group.units:
            units_only = unit(units_only)
        ksp = KSpace.acquire(fft2c(group.unembed(units_only)), full_mask(16))
        out = group(feats, ksp)
    assert out.shape == feats.shape
    assert torch.allclose(out, units_only, atol=1e-4)


def test_group_dc_matches_sampled_columns():
    mask = make_equispaced_mask(16, 4, 0.08)
    _, _, ksp = _inputs(2, 16, mask)
    group = ReconGroup(_small_cfg())
    with torch.no_grad():
        _, img = group(torch.randn(2, 8, 8, 8), ksp, return_image=True)
    sel = mask.lines.bool()
    assert torch.allclose(fft2c(img)[..., sel], ksp.measured[..., sel], atol=1e-5)


def test_model_output_is_data_consistent_for_random_weights():
    mask = make_equispaced_mask(16, 4, 0.08)
    sel = mask.lines.bool()
    for seed in range(20):
        torch.manual_seed(seed)
        model = ReconNetwork(_small_cfg(units_per_group=2))
        _, zf, ksp = _inputs(1, 16, mask, seed)
        with torch.no_grad():
            out = model(zf, ksp)
        assert (fft2c(out)[..., sel] - ksp.measured[..., sel]).abs().max() <= 1e-5


def test_untrained_model_is_finite():
    mask = make_equispaced_mask(16, 4, 0.08)
    _, zf, ksp = _inputs(3, 16, mask)
    with torch.no_grad():
        out = ReconNetwork(_small_cfg(groups=2)).eval()(zf, ksp)
    assert out.shape == (3, 16, 16, 2)
    assert torch.isfinite(out).all()


def test_unbatched_input():
    mask = make_equispaced_mask(16, 4, 0.08)
    _, zf, ksp = _inputs(1, 16, mask)
    with torch.no_grad():
        out = ReconNetwork(_small_cfg())(zf[0], ksp[0])
    assert out.shape == (16, 16, 2)


def test_identity_init_reproduces_zero_filled_dc():
    mask = make_equispaced_mask(16, 4, 0.08)
    _, zf, ksp = _inputs(2, 16, mask)
    model = ReconNetwork(_small_cfg(patch_size=1, groups=2))
    model.init_identity_()
    with torch.no_grad():
        out = model(zf, ksp)
    assert torch.allclose(out, apply_dc(zf, ksp), atol=1e-4)


def test_batch_permutation_equivariance():
    mask = make_equispaced_mask(16, 4, 0.08)
    _, zf, ksp = _inputs(3, 16, mask)
    perm = torch.tensor([2, 0, 1])
    model = ReconNetwork(_small_cfg()).eval()
    with torch.no_grad():
        out = model(zf, ksp)
        out_perm = model(zf[perm], ksp[perm])
    assert torch.allclose(out_perm, out[perm], atol=1e-6)


def _expected_params(cfg):
    """Independent per-layer count for the default scan settings (gate_bc, post_split)."""
    c, ch = cfg.channels, cfg.stream_channels
    d_in, d_s, k = cfg.scan.expand * ch, cfg.scan.d_state, cfg.scan.conv_kernel
    d_t = math.ceil(ch / 16)
    p2 = 2 * cfg.patch_size ** 2

    crm = 4 * ch * ch + 43 * ch
    gen = 2 * ch + ch * 2 * d_in + (9 * d_in + d_in) + d_in * (d_t + 2 * d_s) + d_in * d_s + d_in
    gate = 2 * ((ch * d_s + d_s) + (d_s * 2 * d_s + 2 * d_s))
    refine = (d_t * k + d_t) + 2 * (d_s * k + d_s) + (d_t * d_in + d_in)
    out_proj = d_in * ch + ch
    hidden = max(c // cfg.dsfa_reduction, 1)
    dsfa = (c * hidden + hidden) + (hidden * c + c) + (c * c + c)
    unit = 3 * crm + gen + gate + refine + out_proj + dsfa

    embed = p2 * c + c
    unembed = c * p2 + p2
    group = cfg.units_per_group * unit + embed + unembed
    return embed + unembed + cfg.groups * group


@pytest.mark.parametrize("cfg", [
    _small_cfg(),
    _small_cfg(patch_size=1, channels=16, groups=2),
    ModelConfig(groups=2, units_per_group=2, patch_size=2, channels=32),
])
def test_count_params_matches_layer_sum(cfg):
    assert count_params(cfg) == _expected_params(cfg)


def test_count_params_patch_size_only_moves_patch_layers():
    p1, p2 = _small_cfg(patch_size=1, groups=2), _small_cfg(patch_size=2, groups=2)
    c, pairs = 8, 1 + 2
    assert count_params(p2) - count_params(p1) == pairs * ((8 - 2) * c + (8 - 2) * c + (8 - 2))


def test_count_params_more_than_doubles_with_channels():
    cfg = _small_cfg(channels=16)
    assert count_params(replace(cfg, channels=32)) > 2 * count_params(cfg)
