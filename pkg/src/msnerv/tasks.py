"""Generalisation experiments: masked-training inpainting and frame interpolation."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from msnerv.config import RunConfig
from msnerv.errors import ConfigError
from msnerv.metrics import psnr
from msnerv.model import MSNeRV
from msnerv.objective import downscale_mask
from msnerv.trainer import fit
from msnerv.video_io import ResolutionPyramid


@dataclass(frozen=True)
class MaskSpec:
    """Central rectangle (pixels) excluded from every loss term."""

    height: int
    width: int

    @classmethod
    def parse(cls, text: str) -> "MaskSpec":
        try:
            h, w = (int(v) for v in text.lower().split("x"))
        except ValueError as exc:
            raise ConfigError(f"mask must look like 120x120, got {text!r}") from exc
        return cls(h, w)

    def bounds(self, frame_h: int, frame_w: int) -> tuple[int, int, int, int]:
        if self.height > frame_h or self.width > frame_w or self.height < 0 or self.width < 0:
            raise ConfigError(f"mask {self.height}x{self.width} does not fit a {frame_h}x{frame_w} frame")
        if self.height == frame_h and self.width == frame_w:
            raise ConfigError("mask covers the entire frame")
        r0 = (frame_h - self.height) // 2
        c0 = (frame_w - self.width) // 2
        return r0, c0, self.height, self.width

    def tensor(self, frame_h: int, frame_w: int, dtype=torch.float32) -> torch.Tensor:
        """``[1, 1, H, W]`` map with 1 on excluded pixels."""
        r0, c0, h, w = self.bounds(frame_h, frame_w)
        m = torch.zeros(1, 1, frame_h, frame_w, dtype=dtype)
        m[..., r0:r0 + h, c0:c0 + w] = 1
        return m

    def pyramid(self, frame_h: int, frame_w: int, levels: int) -> list[torch.Tensor]:
        return downscale_mask(self.tensor(frame_h, frame_w), levels)


def masked_psnr(recon, ref, mask: MaskSpec) -> dict:
    """PSNR inside and outside the mask for ``[T, H, W, 3]`` videos."""
    recon, ref = np.asarray(recon), np.asarray(ref)
    r0, c0, h, w = mask.bounds(*ref.shape[1:3])
    inside = np.zeros(ref.shape[1:3], dtype=bool)
    inside[r0:r0 + h, c0:c0 + w] = True
    out = {}
    if inside.any():
        out["masked"] = psnr(recon[:, inside], ref[:, inside])
    out["unmasked"] = psnr(recon[:, ~inside], ref[:, ~inside])
    return out


def train_inpaint(cfg: RunConfig, pyramid: ResolutionPyramid, mask: MaskSpec, run_dir=None,
                  dtype=torch.float32, with_qat: bool = False):
    """Fit a model whose losses ignore the masked region at every pyramid level."""
    _, h, w, _ = pyramid.levels[-1].shape
    m = mask.tensor(h, w, dtype) if mask.height and mask.width else None
    return fit(cfg, pyramid, run_dir, dtype=dtype, mask=m, with_qat=with_qat)


@torch.no_grad()
def interpolate_frames(model: MSNeRV, source_indices, batch: int = 4) -> tuple[torch.Tensor, list[bool]]:
    """Decode unseen frames of a model fitted on the odd frames of a clip.

    Training index ``m`` holds source frame ``2m - 1``. An even source frame
    ``2m`` is decoded from the midpoint of the fused grids of training frames
    ``m`` and ``m + 1`` (the GoP grid of frame ``m`` is used for both halves),
    at temporal position ``m + 0.5``. Frames without a right neighbour fall
    back to the nearest trained grid and are flagged.

    Returns ``([n, H, W, 3] frames, fallback flags)``.
    """
    enc = model.encoder
    t_train = model.num_frames
    frames, flags = [], []
    pending: list[tuple[torch.Tensor, float]] = []

    def flush():
        if not pending:
            return
        grids = torch.cat([g for g, _ in pending])
        ts = torch.tensor([t for _, t in pending], dtype=grids.dtype)
        frames.append(model.decoder(grids, ts, train_mode=False).output.permute(0, 2, 3, 1))
        pending.clear()

    for src in source_indices:
        src = int(src)
        if src % 2:
            raise ConfigError(f"frame {src} is a training frame; interpolation targets even indices")
        left = src // 2
        right = left + 1
        if left < 1 or right > t_train:
            near = min(max(left, 1), t_train)
            warnings.warn(f"frame {src}: no trained neighbour on both sides, using frame {2 * near - 1}",
                          stacklevel=2)
            grid = enc(torch.tensor([near]))
            pending.append((grid, float(near)))
            flags.append(True)
        else:
            both = torch.tensor([left, right])
            temporal = enc.fuse_temporal(both).mean(dim=0, keepdim=True)
            grid = temporal + enc.background(torch.tensor([left]))
            pending.append((grid, left + 0.5))
            flags.append(False)
        if len(pending) >= batch:
            flush()
    flush()
    return torch.cat(frames), flags
