"""Multi-scale spatial decoder.

The fused grid is upsampled by a ladder of multi-scale feature (MSF) blocks.
Each block performs a hybrid upsample (bilinear + pixel shuffle + a periodic
learnable local grid), projects to its channel width, runs ``K`` fusion
layers and adds a cross-depth projection of all fusion-layer outputs.

All tensors are NCHW.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from msnerv.errors import ConfigError

UPSAMPLE_MODES = ("hybrid", "bilinear", "shuffle")
FUSION_KINDS = ("msf", "conv_mlp")


def channel_schedule(c0: int, factors: Sequence[int], channels_min: int = 12, growth: float = 1.0) -> list[int]:
    """Block output widths ``C_n = max(C_min, ceil(C_{n-1} / s_n) * g)``."""
    out = []
    c = c0
    for s in factors:
        c = max(channels_min, int(math.ceil(math.ceil(c / s) * growth)))
        out.append(c)
    return out


class ChannelNorm(nn.Module):
    """Layer normalisation over the channel axis of an NCHW tensor."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(dim=1, keepdim=True)
        var = (x - mu).pow(2).mean(dim=1, keepdim=True)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight.view(1, -1, 1, 1) + self.bias.view(1, -1, 1, 1)


def interp_knots(grid: torch.Tensor, t: torch.Tensor, num_frames: int) -> torch.Tensor:
    """Linear interpolation of ``grid[knots, ...]`` at frame positions ``t`` (1-based, may be fractional)."""
    knots = grid.shape[0]
    t = t.to(grid.dtype).reshape(-1)
    if knots == 1 or num_frames <= 1:
        return grid[torch.zeros(len(t), dtype=torch.long)]
    pos = (t - 1) / (num_frames - 1) * (knots - 1)
    i0 = torch.clamp(torch.floor(pos).long(), 0, knots - 2)
    frac = (pos - i0.to(grid.dtype)).view(-1, *([1] * (grid.dim() - 1)))
    return (1 - frac) * grid[i0] + frac * grid[i0 + 1]


class HybridUpsample(nn.Module):
    """Bilinear + pixel-shuffle upsampling plus a periodic local grid."""

    def __init__(self, channels: int, factor: int, num_frames: int, mode: str = "hybrid",
                 knots: int = 3, init_range: float = 1e-2):
        super().__init__()
        if mode not in UPSAMPLE_MODES:
            raise ConfigError(f"unknown upsample mode {mode!r}")
        self.factor = factor
        self.mode = mode
        self.num_frames = num_frames
        self.use_bilinear = mode in ("hybrid", "bilinear")
        if mode in ("hybrid", "shuffle"):
            self.shuffle_proj = nn.Conv2d(channels, channels * factor * factor, 1)
            if mode == "hybrid":
                # start as pure bilinear
                nn.init.zeros_(self.shuffle_proj.weight)
                nn.init.zeros_(self.shuffle_proj.bias)
        else:
            self.shuffle_proj = None
        self.local_grid = nn.Parameter(torch.empty(knots, channels, factor, factor).uniform_(-init_range, init_range))

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        s = self.factor
        h, w = x.shape[-2:]
        out = 0
        if self.use_bilinear:
            out = F.interpolate(x, scale_factor=s, mode="bilinear", align_corners=False)
        if self.shuffle_proj is not None:
            out = out + F.pixel_shuffle(self.shuffle_proj(x), s)
        gamma = interp_knots(self.local_grid, t, self.num_frames)
        # pixel (i, j) of the output receives gamma[i mod s, j mod s]
        return out + gamma.repeat(1, 1, h, w)


class FusionLayer(nn.Module):
    """Depthwise 3x3 + 5x5 fusion with an MLP branch merged by channel slicing.

    ``y = x + cat(Xh[:, :C-Cm], MLP(norm(Xh)))`` with ``Xh = DW3(norm(x)) + DW5(norm(x))``.
    The MLP emits only the ``Cm`` channels that survive the slice.
    """

    def __init__(self, channels: int, slice_ratio: float = 0.5, mlp_ratio: float = 2.0, kind: str = "msf"):
        super().__init__()
        if kind not in FUSION_KINDS:
            raise ConfigError(f"unknown fusion layer kind {kind!r}")
        self.kind = kind
        self.channels = channels
        hidden = max(1, int(round(channels * mlp_ratio)))
        self.norm1 = ChannelNorm(channels)
        self.norm2 = ChannelNorm(channels)
        if kind == "msf":
            cm = int(round(channels * slice_ratio))
            if not 0 < cm < channels:
                raise ConfigError(f"slice channels {cm} must lie strictly between 0 and {channels}")
            self.slice_channels = cm
            self.dw3 = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)
            self.dw5 = nn.Conv2d(channels, channels, 5, padding=2, groups=channels)
            out = cm
        else:
            self.slice_channels = channels
            self.conv3 = nn.Conv2d(channels, channels, 3, padding=1)
            out = channels
        self.mlp = nn.Sequential(nn.Conv2d(channels, hidden, 1), nn.GELU(), nn.Conv2d(hidden, out, 1))

    @property
    def radius(self) -> int:
        return 2 if self.kind == "msf" else 1

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n = self.norm1(x)
        if self.kind == "conv_mlp":
            return x + self.mlp(self.norm2(self.conv3(n)))
        fused = self.dw3(n) + self.dw5(n)
        m = self.mlp(self.norm2(fused))
        keep = self.channels - self.slice_channels
        return x + torch.cat([fused[:, :keep], m], dim=1)


class MSFBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, factor: int, depth: int, num_frames: int,
                 upsample: str = "hybrid", fusion: str = "msf", cross_depth: bool = True,
                 slice_ratio: float = 0.5, mlp_ratio: float = 2.0, knots: int = 3, init_range: float = 1e-2):
        super().__init__()
        if depth < 1:
            raise ConfigError("each block needs at least one fusion layer")
        self.factor = factor
        self.upsample = HybridUpsample(in_channels, factor, num_frames, upsample, knots, init_range)
        self.channel_proj = nn.Conv2d(in_channels, out_channels, 1)
        self.layers = nn.ModuleList(
            FusionLayer(out_channels, slice_ratio, mlp_ratio, fusion) for _ in range(depth)
        )
        self.cross = nn.Conv2d(depth * out_channels, out_channels, 1) if cross_depth else None

    def forward(self, x: torch.Tensor, t: torch.Tensor):
        h = self.channel_proj(self.upsample(x, t))
        taps = []
        for layer in self.layers:
            h = layer(h)
            taps.append(h)
        if self.cross is not None:
            h = h + self.cross(torch.cat(taps, dim=1))
        return h, taps


@dataclass
class DecoderState:
    features: list[torch.Tensor]
    projections: list[torch.Tensor] = field(default_factory=list)
    output: torch.Tensor | None = None
    exact: bool = True


class SpatialDecoder(nn.Module):
    def __init__(self, in_channels: int, num_frames: int, factors: Sequence[int] = (3, 2, 2, 2),
                 depths: Sequence[int] | int = 3, channels: Sequence[int] | None = None,
                 channels_min: int = 12, growth: float = 1.0, upsample: str = "hybrid", fusion: str = "msf",
                 cross_depth: bool = True, use_mrs: bool = True, slice_ratio: float = 0.5,
                 mlp_ratio: float = 2.0, knots: int = 3, init_range: float = 1e-2):
        super().__init__()
        factors = [int(s) for s in factors]
        if isinstance(depths, int):
            depths = [depths] * len(factors)
        if len(depths) != len(factors):
            raise ConfigError(f"fusion_depth has {len(depths)} entries for {len(factors)} blocks")
        if channels is None:
            channels = channel_schedule(in_channels, factors, channels_min, growth)
        self.in_channels = in_channels
        self.factors = factors
        self.depths = list(depths)
        self.channels = list(channels)
        self.stride = math.prod(factors)
        self.blocks = nn.ModuleList()
        c_prev = in_channels
        for s, k, c in zip(factors, depths, channels):
            self.blocks.append(MSFBlock(c_prev, c, s, k, num_frames, upsample, fusion, cross_depth,
                                        slice_ratio, mlp_ratio, knots, init_range))
            c_prev = c
        self.use_mrs = use_mrs
        self.mrs_heads = nn.ModuleList(nn.Conv2d(c, 3, 3, padding=1) for c in channels[:-1]) if use_mrs else None
        self.head = nn.Conv2d(channels[-1], 3, 3, padding=1)
        nn.init.constant_(self.head.bias, 0.5)
        if self.mrs_heads is not None:
            for m in self.mrs_heads:
                nn.init.constant_(m.bias, 0.5)

    @property
    def num_levels(self) -> int:
        return len(self.blocks)

    def forward(self, grid: torch.Tensor, t: torch.Tensor, train_mode: bool = False) -> DecoderState:
        if grid.shape[1] != self.in_channels:
            raise ConfigError(f"grid has {grid.shape[1]} channels, decoder expects {self.in_channels}")
        t = torch.as_tensor(t).reshape(-1)
        feats = []
        x = grid
        for block in self.blocks:
            x, _ = block(x, t)
            feats.append(x)
        projections = []
        if train_mode and self.mrs_heads is not None:
            projections = [head(f) for head, f in zip(self.mrs_heads, feats[:-1])]
        out = self.head(feats[-1])
        if not train_mode:
            out = out.clamp(0.0, 1.0)
        return DecoderState(feats, projections, out)

    def required_context(self) -> int:
        """Grid cells of context that make patch decoding match full-frame decoding."""
        need = Fraction(1)  # output head 3x3
        for block in reversed(self.blocks):
            need += sum(layer.radius for layer in block.layers)
            need = need / block.factor
            if block.upsample.use_bilinear:
                need += 1
        return math.ceil(need)


def decode_patch(decoder: SpatialDecoder, grid: torch.Tensor, t: torch.Tensor,
                 window: tuple[int, int, int, int], context_cells: int | None = None,
                 train_mode: bool = False) -> DecoderState:
    """Decode the full-resolution pixel window ``(row0, col0, rows, cols)``.

    ``grid`` is the full fused grid. The window must be aligned to grid cells.
    Context cells are taken from real neighbours and clipped at the frame
    border, so border handling matches a full-frame decode.
    """
    stride = decoder.stride
    r0, c0, ph, pw = window
    if r0 % stride or c0 % stride or ph % stride or pw % stride:
        raise ConfigError(f"patch window {window} is not aligned to the grid stride {stride}")
    required = decoder.required_context()
    if context_cells is None:
        context_cells = required
    elif context_cells < required:
        warnings.warn(f"patch context {context_cells} < required {required} cells; result is not exact",
                      stacklevel=2)
    gh, gw = grid.shape[-2:]
    gr, gc, nh, nw = r0 // stride, c0 // stride, ph // stride, pw // stride
    a0, a1 = max(0, gr - context_cells), min(gh, gr + nh + context_cells)
    b0, b1 = max(0, gc - context_cells), min(gw, gc + nw + context_cells)
    state = decoder(grid[..., a0:a1, b0:b1], t, train_mode)

    def crop(x, f):
        return x[..., (gr - a0) * f:(gr - a0 + nh) * f, (gc - b0) * f:(gc - b0 + nw) * f]

    cum = []
    f = 1
    for s in decoder.factors:
        f *= s
        cum.append(f)
    feats = [crop(x, f) for x, f in zip(state.features, cum)]
    projs = [crop(x, f) for x, f in zip(state.projections, cum)]
    return DecoderState(feats, projs, crop(state.output, stride), exact=context_cells >= required)
