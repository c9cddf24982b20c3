"""Temporal grid encoder: frame index -> fused low-resolution feature grid.

A frame index ``t`` (1-based) is mapped to a ``[C0, h, w]`` grid by

1. sampling a set of multi-resolution base grids at indices ``t .. t+l-1``,
2. mixing those samples with a learnable per-frame window of ``l`` weights,
3. adding the background grid of the group of pictures that contains ``t``.

Grids are stored channel-first so they can be fed straight into convolutions.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from msnerv.errors import ConfigError

DEFAULT_BASE_GRIDS = ((1.0, 1.0, 0.5), (0.2, 0.5, 0.5))


def gop_index(t, gop_length: int):
    """1-based GoP index ``ceil(t / G)``; works on ints and integer tensors."""
    if isinstance(t, torch.Tensor):
        return torch.div(t + gop_length - 1, gop_length, rounding_mode="floor")
    return -(-int(t) // gop_length)


def default_gop_length(num_frames: int, gop_count: int) -> int:
    return max(1, math.ceil(num_frames / max(1, gop_count)))


def split_channels(channels: int, fractions: Sequence[float]) -> list[int]:
    sizes = [max(1, int(round(channels * f))) for f in fractions[:-1]]
    sizes.append(channels - sum(sizes))
    if sizes[-1] < 1:
        raise ConfigError(f"cannot split {channels} channels as {list(fractions)}")
    return sizes


class TemporalEncoder(nn.Module):
    """Base grids, temporal window weights and GoP background grids.

    Args:
        num_frames: T, the number of frames represented.
        grid_hw: spatial size ``(h, w)`` of the fused grid (frame size / 24).
        channels: C0.
        window: temporal window size ``l`` (odd).
        gop_count: number of GoPs the clip is split into by default.
        base_grids: ``(temporal_scale, spatial_scale, channel_fraction)`` per sub-grid.
        use_temporal: when False there is no window and no GoP grid and
            ``encode(t)`` is simply the base sample at ``t``.
    """

    def __init__(
        self,
        num_frames: int,
        grid_hw: tuple[int, int],
        channels: int,
        window: int = 5,
        gop_count: int = 5,
        base_grids: Sequence[Sequence[float]] = DEFAULT_BASE_GRIDS,
        use_temporal: bool = True,
        init_range: float = 1e-2,
        gop_length: int | None = None,
    ):
        super().__init__()
        if num_frames < 1:
            raise ConfigError("num_frames must be >= 1")
        if window < 1 or window % 2 == 0:
            raise ConfigError(f"window size must be odd, got {window}")
        self.num_frames = num_frames
        self.grid_hw = tuple(grid_hw)
        self.channels = channels
        self.use_temporal = use_temporal
        self.window = window if use_temporal else 1
        self.extent = num_frames + self.window - 1
        h, w = self.grid_hw

        fractions = [float(g[2]) for g in base_grids]
        ch = split_channels(channels, fractions)
        self.base_specs = []
        self.base = nn.ParameterList()
        for (ts, ss, _), c in zip(base_grids, ch):
            tj = max(2, math.ceil(float(ts) * self.extent))
            hj = max(1, math.ceil(float(ss) * h))
            wj = max(1, math.ceil(float(ss) * w))
            self.base_specs.append((tj, hj, wj, c))
            self.base.append(nn.Parameter(torch.empty(tj, c, hj, wj).uniform_(-init_range, init_range)))

        if use_temporal:
            weights = torch.zeros(num_frames, self.window)
            weights[:, self.window // 2] = 1.0
            self.window_weights = nn.Parameter(weights)
            self.gop_length = gop_length or default_gop_length(num_frames, gop_count)
            self.num_gops = math.ceil(num_frames / self.gop_length)
            self.gop = nn.Parameter(torch.empty(self.num_gops, channels, h, w).uniform_(-init_range, init_range))
        else:
            self.window_weights = None
            self.gop_length = num_frames
            self.num_gops = 1
            self.gop = None

    def _check_index(self, t: torch.Tensor, upper: int) -> None:
        if t.numel() and (int(t.min()) < 1 or int(t.max()) > upper):
            raise IndexError(f"frame index outside [1, {upper}]: {t.tolist()}")

    def _sample_grid(self, grid: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        tj = grid.shape[0]
        span = self.extent - 1
        if span == 0:
            planes = grid[torch.zeros_like(t)]
        else:
            # exact integer knot arithmetic: position (t-1)(Tj-1)/span
            num = (t - 1) * (tj - 1)
            i0 = torch.clamp(torch.div(num, span, rounding_mode="floor"), max=tj - 2)
            frac = ((num - i0 * span).to(grid.dtype) / span).view(-1, 1, 1, 1)
            planes = (1 - frac) * grid[i0] + frac * grid[i0 + 1]
        if planes.shape[-2:] != self.grid_hw:
            planes = F.interpolate(planes, size=self.grid_hw, mode="bilinear", align_corners=False)
        return planes

    def sample_base(self, t) -> torch.Tensor:
        """Base features at integer indices ``t`` in ``[1, T+l-1]`` -> ``[n, C0, h, w]``."""
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        self._check_index(t, self.extent)
        return torch.cat([self._sample_grid(g, t) for g in self.base], dim=1)

    def fuse_temporal(self, t) -> torch.Tensor:
        """Window-weighted sum of base samples at ``t .. t+l-1`` -> ``[n, C0, h, w]``."""
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        self._check_index(t, self.num_frames)
        if not self.use_temporal:
            return self.sample_base(t)
        offsets = torch.arange(self.window)
        idx = (t[:, None] + offsets[None, :]).reshape(-1)
        samples = self.sample_base(idx).view(len(t), self.window, self.channels, *self.grid_hw)
        weights = self.window_weights[t - 1]
        return torch.einsum("nl,nlchw->nchw", weights, samples)

    def background(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if self.gop is None:
            return torch.zeros(len(t), self.channels, *self.grid_hw, dtype=self.base[0].dtype)
        return self.gop[gop_index(t, self.gop_length) - 1]

    def forward(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        fused = self.fuse_temporal(t)
        if self.gop is not None:
            fused = fused + self.gop[gop_index(t, self.gop_length) - 1]
        return fused

    encode = forward
