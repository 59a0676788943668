"""
Conditioned selective-scan engine.

Sequences are token-major ``(B, L, d)``; state-space parameters are
channel-major ``(B, d, L)`` to match the depthwise Conv1d refinement. Tokens are
the raster (row-major) flattening of a 2D feature map, scanned once, left to
right.
"""

import logging
import math
from dataclasses import dataclass, replace

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange, repeat

from .config import ConvPlacement, GateMode, ScanConfig
from .errors import NonPositiveDelta, ShapeMismatch

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SSMParams:
    delta: torch.Tensor  # (B, d_t, L) as generated; (B, d_inner, L) once refined
    Bmat: torch.Tensor  # (B, d_s, L)
    Cmat: torch.Tensor  # (B, d_s, L)
    A_log: torch.Tensor  # (d_inner, d_s)
    D_skip: torch.Tensor  # (d_inner,)

    @property
    def A(self):
        return -torch.exp(self.A_log)


@dataclass(frozen=True)
class GuidanceCond:
    Bh: torch.Tensor
    Ch: torch.Tensor
    delta_h: torch.Tensor | None = None

    def __neg__(self):
        return GuidanceCond(
            Bh=-self.Bh,
            Ch=-self.Ch,
            delta_h=None if self.delta_h is None else -self.delta_h,
        )


def a_log_init(d_inner, d_state):
    # S4D-real: A = -(1..d_s) for every channel
    a = repeat(torch.arange(1, d_state + 1, dtype=torch.float32), "n -> d n", d=d_inner)
    return nn.Parameter(torch.log(a).contiguous())


def dt_proj_init(dt_rank, d_inner, dt_min=1e-3, dt_max=1e-1, dt_init_floor=1e-4):
    dt_proj = nn.Linear(dt_rank, d_inner, bias=True)
    std = dt_rank ** -0.5
    nn.init.uniform_(dt_proj.weight, -std, std)
    # softplus(bias) lands in [dt_min, dt_max]
    dt = torch.exp(torch.rand(d_inner) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
    dt = dt.clamp(min=dt_init_floor)
    with torch.no_grad():
        dt_proj.bias.copy_(dt + torch.log(-torch.expm1(-dt)))
    return dt_proj


def _depthwise1d(channels, kernel):
    return nn.Conv1d(channels, channels, kernel, padding=kernel // 2, groups=channels, bias=True)


def _identity_kernel_(conv):
    with torch.no_grad():
        conv.weight.zero_()
        conv.weight[:, :, conv.kernel_size[0] // 2] = 1.0
        if conv.bias is not None:
            conv.bias.zero_()


def _check_seq(x, hw, channels, what):
    if x.ndim != 3 or x.shape[-1] != channels or x.shape[1] != hw[0] * hw[1]:
        raise ShapeMismatch(
            f"{what}: expected (B, {hw[0] * hw[1]}, {channels}), got {tuple(x.shape)}"
        )


class ParamGenerator(nn.Module):
    """generate_params: Norm -> Linear -> split(F_c, Z); SiLU(DWConv3x3(F_c)) -> Linear -> split(Δ, B, C)."""

    def __init__(self, stream_channels, cfg: ScanConfig):
        super().__init__()
        self.channels = stream_channels
        self.d_inner = cfg.expand * stream_channels
        self.d_state = cfg.d_state
        self.dt_rank = cfg.resolved_dt_rank(stream_channels)
        joint = self.dt_rank + 2 * self.d_state

        self.norm = nn.LayerNorm(stream_channels)
        self.in_proj = nn.Linear(stream_channels, 2 * self.d_inner, bias=False)
        self.conv2d = nn.Conv2d(self.d_inner, self.d_inner, 3, padding=1, groups=self.d_inner, bias=True)
        self.act = nn.SiLU()
        self.x_proj = nn.Linear(self.d_inner, joint, bias=False)
        self.pre_conv = (
            _depthwise1d(joint, cfg.conv_kernel)
            if cfg.conv_placement == ConvPlacement.PRE_SPLIT else None
        )
        self.A_log = a_log_init(self.d_inner, self.d_state)
        self.A_log._no_weight_decay = True
        self.D = nn.Parameter(torch.ones(self.d_inner))
        self.D._no_weight_decay = True

    def forward(self, f_low_seq, hw):
        _check_seq(f_low_seq, hw, self.channels, "generate_params")
        h, w = hw
        fc, z = self.in_proj(self.norm(f_low_seq)).chunk(2, dim=-1)
        fc = rearrange(fc, "b (h w) d -> b d h w", h=h, w=w)
        f_conv = rearrange(self.act(self.conv2d(fc)), "b d h w -> b (h w) d")

        x_dbl = rearrange(self.x_proj(f_conv), "b l c -> b c l")
        if self.pre_conv is not None:
            x_dbl = self.pre_conv(x_dbl)
        delta, b, c = torch.split(x_dbl, [self.dt_rank, self.d_state, self.d_state], dim=1)
        params = SSMParams(delta=delta, Bmat=b, Cmat=c, A_log=self.A_log, D_skip=self.D)
        return f_conv, z, params


class GuidanceGate(nn.Module):
    """gate_guidance: turns the raster-flattened guidance map into additive (Δ_h,) B_h, C_h terms."""

    def __init__(self, stream_channels, cfg: ScanConfig):
        super().__init__()
        self.mode = cfg.gate_mode
        self.channels = stream_channels
        self.d_state = cfg.d_state
        self.dt_rank = cfg.resolved_dt_rank(stream_channels)
        joint = self.dt_rank + 2 * self.d_state

        if self.mode == GateMode.GATE_BC:
            self.b_proj = nn.Linear(stream_channels, self.d_state)
            self.b_gate = nn.Linear(self.d_state, 2 * self.d_state)
            self.c_proj = nn.Linear(stream_channels, self.d_state)
            self.c_gate = nn.Linear(self.d_state, 2 * self.d_state)
        elif self.mode == GateMode.GATE_PRE:
            self.proj = nn.Linear(stream_channels, joint)
            self.gate = nn.Linear(joint, 2 * joint)
        else:
            self.gate2d = nn.Conv2d(stream_channels, 2 * joint, 3, padding=1)

    @staticmethod
    def _glu(t):
        a, b = t.chunk(2, dim=-1)
        return F.gelu(a) * b

    def _split_joint(self, joint):
        joint = rearrange(joint, "b l c -> b c l")
        delta_h, bh, ch = torch.split(joint, [self.dt_rank, self.d_state, self.d_state], dim=1)
        return GuidanceCond(Bh=bh, Ch=ch, delta_h=delta_h)

    def forward(self, g_seq, hw):
        _check_seq(g_seq, hw, self.channels, "gate_guidance")
        if self.mode == GateMode.GATE_BC:
            bh = self._glu(self.b_gate(self.b_proj(g_seq)))
            ch = self._glu(self.c_gate(self.c_proj(g_seq)))
            return GuidanceCond(Bh=rearrange(bh, "b l s -> b s l"), Ch=rearrange(ch, "b l s -> b s l"))
        if self.mode == GateMode.GATE_PRE:
            return self._split_joint(self._glu(self.gate(self.proj(g_seq))))
        g2d = rearrange(g_seq, "b (h w) c -> b c h w", h=hw[0], w=hw[1])
        a, b = self.gate2d(g2d).chunk(2, dim=1)
        return self._split_joint(rearrange(F.gelu(a) * b, "b c h w -> b (h w) c"))


def condition(params, cond):
    """B += B_h, C += C_h; Δ only moves when the guidance carries a Δ term."""
    if cond.Bh.shape != params.Bmat.shape or cond.Ch.shape != params.Cmat.shape:
        raise ShapeMismatch(
            f"guidance {tuple(cond.Bh.shape)}/{tuple(cond.Ch.shape)} vs params "
            f"{tuple(params.Bmat.shape)}/{tuple(params.Cmat.shape)}"
        )
    delta = params.delta
    if cond.delta_h is not None:
        if cond.delta_h.shape != delta.shape:
            raise ShapeMismatch(f"guidance Δ {tuple(cond.delta_h.shape)} vs Δ {tuple(delta.shape)}")
        delta = delta + cond.delta_h
    return replace(params, delta=delta, Bmat=params.Bmat + cond.Bh, Cmat=params.Cmat + cond.Ch)


class SpatialRefiner(nn.Module):
    """refine_params: per-branch depthwise Conv1d along L, then Δ expansion to d_inner and softplus."""

    def __init__(self, stream_channels, cfg: ScanConfig):
        super().__init__()
        self.d_inner = cfg.expand * stream_channels
        self.dt_rank = cfg.resolved_dt_rank(stream_channels)
        self.post_split = cfg.conv_placement == ConvPlacement.POST_SPLIT
        if self.post_split:
            self.delta_conv = _depthwise1d(self.dt_rank, cfg.conv_kernel)
            self.b_conv = _depthwise1d(cfg.d_state, cfg.conv_kernel)
            self.c_conv = _depthwise1d(cfg.d_state, cfg.conv_kernel)
        self.dt_proj = dt_proj_init(self.dt_rank, self.d_inner)

    def reset_identity_(self):
        """Center-tap kernels: the convolutions become the identity."""
        if self.post_split:
            for conv in (self.delta_conv, self.b_conv, self.c_conv):
                _identity_kernel_(conv)

    def forward(self, params):
        delta, b, c = params.delta, params.Bmat, params.Cmat
        if self.post_split:
            delta, b, c = self.delta_conv(delta), self.b_conv(b), self.c_conv(c)
        delta = F.softplus(rearrange(self.dt_proj(rearrange(delta, "b r l -> b l r")), "b l d -> b d l"))
        return replace(params, delta=delta, Bmat=b, Cmat=c)


def _check_scan_inputs(x, params):
    if x.ndim != 3:
        raise ShapeMismatch(f"scan input must be (B, L, d_inner), got {tuple(x.shape)}")
    bsz, length, d_inner = x.shape
    if params.delta.shape != (bsz, d_inner, length):
        raise ShapeMismatch(f"Δ must be {(bsz, d_inner, length)}, got {tuple(params.delta.shape)}")
    if params.Bmat.shape[::2] != (bsz, length) or params.Cmat.shape != params.Bmat.shape:
        raise ShapeMismatch(f"B/C must be (B, d_s, L), got {tuple(params.Bmat.shape)}/{tuple(params.Cmat.shape)}")
    if params.A_log.shape != (d_inner, params.Bmat.shape[1]):
        raise ShapeMismatch(f"A_log must be {(d_inner, params.Bmat.shape[1])}, got {tuple(params.A_log.shape)}")
    if not bool((params.delta > 0).all()):
        raise NonPositiveDelta("Δ must be strictly positive before the scan")


def _discretize(x, params):
    # the scan accumulates in float64 whatever the model dtype
    delta = rearrange(params.delta, "b d l -> b l d").double()
    dA = delta.unsqueeze(-1) * params.A.double()  # (B, L, D, N)
    b = rearrange(params.Bmat, "b n l -> b l n").double()
    dBx = delta.unsqueeze(-1) * b.unsqueeze(2) * x.double().unsqueeze(-1)  # (B, L, D, N)
    return dA, dBx, rearrange(params.Cmat, "b n l -> b l n").double()


def _segsum(a):
    """
    (B, T, D, N) log-decays -> (B, D, N, T, T) with [t, s] = sum_{s<r<=t} a_r
    and -inf above the diagonal. Summed directly, never as a difference of
    cumulative sums.
    """
    span = a.shape[1]
    seg = repeat(a, "b t d n -> b d n t s", s=span)
    strict = torch.ones(span, span, dtype=torch.bool, device=a.device).tril(-1)
    seg = seg.masked_fill(~strict, 0.0).cumsum(dim=-2)
    causal = torch.ones(span, span, dtype=torch.bool, device=a.device).tril()
    return seg.masked_fill(~causal, float("-inf"))


def selective_scan_seq(x, params, return_states=False):
    """
    Reference recurrence, one token at a time from a zero state:
        h_t = exp(Δ_t A) h_{t-1} + Δ_t B_t x_t
        y_t = C_t . h_t + D x_t
    """
    _check_scan_inputs(x, params)
    dA, dBx, c = _discretize(x, params)
    h = dBx.new_zeros(x.shape[0], x.shape[2], params.A_log.shape[1])
    ys, states = [], []
    for t in range(x.shape[1]):
        h = torch.exp(dA[:, t]) * h + dBx[:, t]
        ys.append((h * c[:, t].unsqueeze(1)).sum(dim=-1))
        if return_states:
            states.append(h.to(x.dtype))
    y = torch.stack(ys, dim=1).to(x.dtype) + x * params.D_skip
    if return_states:
        return y, torch.stack(states, dim=1)
    return y


def selective_scan(x, params, chunk_size=16):
    """
    Chunked form of the same recurrence. Within a chunk every state is a
    decay-weighted sum of the chunk's inputs plus the decayed carry-in state;
    chunks are chained sequentially.
    """
    _check_scan_inputs(x, params)
    dA, dBx, c = _discretize(x, params)
    bsz, length, d_inner = x.shape
    h = dBx.new_zeros(bsz, d_inner, params.A_log.shape[1])
    ys = []
    for start in range(0, length, chunk_size):
        stop = min(start + chunk_size, length)
        a, u, cc = dA[:, start:stop], dBx[:, start:stop], c[:, start:stop]
        decay = _segsum(a)  # (B, D, N, T, T)
        carry = torch.exp(torch.cumsum(a, dim=1)) * h.unsqueeze(1)  # (B, T, D, N)
        hs = torch.einsum("bdnts,bsdn->btdn", torch.exp(decay), u) + carry
        ys.append(torch.einsum("btdn,btn->btd", hs, cc))
        h = hs[:, -1]
    return torch.cat(ys, dim=1).to(x.dtype) + x * params.D_skip
