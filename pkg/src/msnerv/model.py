"""The full representation: temporal encoder followed by the spatial decoder."""

from __future__ import annotations

import math

import torch
from torch import nn

from msnerv.config import RunConfig
from msnerv.decoder import DecoderState, SpatialDecoder, decode_patch
from msnerv.encoder import TemporalEncoder
from msnerv.errors import ConfigError

TRAINING_ONLY_PREFIXES = ("decoder.mrs_heads.",)


class MSNeRV(nn.Module):
    def __init__(self, cfg: RunConfig, num_frames: int, height: int, width: int):
        super().__init__()
        e, d = cfg.encoder, cfg.decoder
        stride = math.prod(d.factors)
        if height % stride or width % stride:
            raise ConfigError(f"{width}x{height} frames are not divisible by the decoder stride {stride}")
        self.num_frames = num_frames
        self.height = height
        self.width = width
        self.grid_hw = (height // stride, width // stride)
        self.encoder = TemporalEncoder(
            num_frames, self.grid_hw, e.channels, e.window, e.gop_count, e.base_grids,
            use_temporal=e.temporal, init_range=e.init_range,
        )
        self.decoder = SpatialDecoder(
            e.channels, num_frames, d.factors, d.fusion_depth, channels_min=d.channels_min, growth=d.growth,
            upsample=d.upsample, fusion=d.fusion, cross_depth=d.cross_depth, use_mrs=cfg.loss.mrs,
            slice_ratio=d.slice_ratio, mlp_ratio=d.mlp_ratio, knots=d.knots, init_range=e.init_range,
        )
        # shape chain: h * prod(s) == H
        assert self.grid_hw[0] * self.decoder.stride == height and self.grid_hw[1] * self.decoder.stride == width

    def forward(self, t, train_mode: bool = False, window: tuple[int, int, int, int] | None = None,
                context: int | None = None) -> DecoderState:
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        grid = self.encoder(t)
        return self.decode_grid(grid, t, train_mode, window, context)

    def decode_grid(self, grid, t, train_mode=False, window=None, context=None) -> DecoderState:
        if window is None:
            return self.decoder(grid, t, train_mode)
        return decode_patch(self.decoder, grid, t, window, context, train_mode)

    @torch.no_grad()
    def reconstruct(self, frames=None, batch: int = 4) -> torch.Tensor:
        """Decode frames (1-based indices, default all) to ``[T, H, W, 3]`` in [0, 1]."""
        if frames is None:
            frames = range(1, self.num_frames + 1)
        frames = list(frames)
        out = []
        for i in range(0, len(frames), batch):
            state = self(frames[i:i + batch], train_mode=False)
            out.append(state.output.permute(0, 2, 3, 1))
        return torch.cat(out)

    def decodable_parameters(self) -> list[tuple[str, nn.Parameter]]:
        """Parameters needed to decode video, in a fixed order (MRS heads excluded)."""
        return [(n, p) for n, p in self.named_parameters() if not n.startswith(TRAINING_ONLY_PREFIXES)]

    def num_decodable(self) -> int:
        return sum(p.numel() for _, p in self.decodable_parameters())


def build_model(cfg: RunConfig, num_frames: int, height: int, width: int, dtype=torch.float32) -> MSNeRV:
    return MSNeRV(cfg, num_frames, height, width).to(dtype)


def count_parameters(cfg: RunConfig, num_frames: int, height: int, width: int) -> int:
    """Decodable parameter count without allocating weights."""
    with torch.device("meta"):
        model = MSNeRV(cfg, num_frames, height, width)
    return model.num_decodable()
