"""Quality and rate metrics: PSNR, MS-SSIM and Bjontegaard delta rate."""

from __future__ import annotations

import csv
import math
import os
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from msnerv.errors import ConfigError

PSNR_CAP = 100.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WIN_SIZE = 11
WIN_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    frames = getattr(x, "frames", x)
    return torch.from_numpy(np.asarray(frames, dtype=np.float64))


def psnr(a, b) -> float:
    """PSNR in dB of two ``[..., H, W, 3]`` arrays in [0, 1], from the global MSE."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(torch.mean((a.double() - b.double()) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def mse_to_psnr(mse: float) -> float:
    return PSNR_CAP if mse <= 0 else min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = WIN_SIZE, sigma: float = WIN_SIGMA, dtype=torch.float64) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - size // 2
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _blur_valid(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    c = x.shape[1]
    k = win.to(x.dtype)
    x = F.conv2d(x, k.view(1, 1, 1, -1).repeat(c, 1, 1, 1), groups=c)
    return F.conv2d(x, k.view(1, 1, -1, 1).repeat(c, 1, 1, 1), groups=c)


def ssim_components(x: torch.Tensor, y: torch.Tensor, win: torch.Tensor):
    """Per-image, per-channel mean SSIM and contrast-structure terms of NCHW inputs."""
    c1, c2 = K1 ** 2, K2 ** 2
    mu1, mu2 = _blur_valid(x, win), _blur_valid(y, win)
    s11 = _blur_valid(x * x, win) - mu1 * mu1
    s22 = _blur_valid(y * y, win) - mu2 * mu2
    s12 = _blur_valid(x * y, win) - mu1 * mu2
    cs_map = (2 * s12 + c2) / (s11 + s22 + c2)
    ssim_map = (2 * mu1 * mu2 + c1) / (mu1 * mu1 + mu2 * mu2 + c1) * cs_map
    return ssim_map.flatten(2).mean(-1), cs_map.flatten(2).mean(-1)


def ms_ssim_scales(height: int, width: int, win_size: int = WIN_SIZE, max_scales: int = 5) -> int:
    """Largest scale count whose coarsest image still exceeds the window."""
    side = min(height, width)
    if side < win_size:
        raise ValueError(f"image side {side} smaller than the {win_size}x{win_size} SSIM window")
    m = max_scales
    while m > 1 and side <= (win_size - 1) * 2 ** (m - 1):
        m -= 1
    return m


def ms_ssim_nchw(x: torch.Tensor, y: torch.Tensor, scales: int | None = None, floor: float = 0.0) -> torch.Tensor:
    """Differentiable MS-SSIM per image (averaged over channels) for NCHW inputs in [0, 1].

    ``floor`` clamps the per-scale terms from below; 0 gives the standard
    nonnegative form, a small positive value keeps gradients finite for losses.
    """
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if scales is None:
        scales = ms_ssim_scales(*x.shape[-2:])
    weights = torch.tensor(MS_SSIM_WEIGHTS[:scales], dtype=x.dtype)
    if scales < len(MS_SSIM_WEIGHTS):
        weights = weights / weights.sum()
    win = gaussian_window(dtype=x.dtype)
    terms = []
    for i in range(scales):
        ssim, cs = ssim_components(x, y, win)
        if i < scales - 1:
            terms.append(torch.clamp(cs, min=floor))
            pad = [s % 2 for s in x.shape[-2:]]
            x = F.avg_pool2d(x, 2, padding=pad)
            y = F.avg_pool2d(y, 2, padding=pad)
    terms.append(torch.clamp(ssim, min=floor))
    stacked = torch.stack(terms, dim=0)
    val = torch.prod(stacked ** weights.view(-1, 1, 1), dim=0)
    return val.mean(dim=1)


def ms_ssim(a, b, scales: int | None = None) -> float:
    """Mean MS-SSIM over frames of two ``[T, H, W, 3]`` videos."""
    a, b = _as_tensor(a).double(), _as_tensor(b).double()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 3:
        a, b = a[None], b[None]
    x = a.permute(0, 3, 1, 2)
    y = b.permute(0, 3, 1, 2)
    return float(ms_ssim_nchw(x, y, scales).mean())


@dataclass
class RDPoint:
    bpp: float
    psnr_db: float
    ms_ssim: float

    def __post_init__(self):
        for v in (self.bpp, self.psnr_db, self.ms_ssim):
            if not math.isfinite(v):
                raise ValueError(f"non-finite RD value in {self}")
        if self.bpp <= 0:
            raise ValueError("bpp must be positive")


@dataclass
class RDCurve:
    label: str
    points: list[RDPoint] = field(default_factory=list)

    def __post_init__(self):
        self.points = sorted(self.points, key=lambda p: p.bpp)
        rates = [p.bpp for p in self.points]
        if len(set(rates)) != len(rates):
            raise ValueError(f"curve {self.label!r}: bpp values must be strictly increasing")
        for metric in ("psnr_db", "ms_ssim"):
            q = [getattr(p, metric) for p in self.points]
            if any(b < a for a, b in zip(q, q[1:])):
                warnings.warn(f"curve {self.label!r}: {metric} decreases with rate", stacklevel=2)

    def arrays(self, quality: str = "psnr"):
        attr = {"psnr": "psnr_db", "ms_ssim": "ms_ssim"}[quality]
        return (np.array([p.bpp for p in self.points]), np.array([getattr(p, attr) for p in self.points]))


def bd_rate_arrays(anchor_rate, anchor_q, test_rate, test_q) -> float:
    """BD-rate in percent from raw arrays: cubic fits of log10(rate) against quality."""
    anchor_rate, anchor_q = np.asarray(anchor_rate, float), np.asarray(anchor_q, float)
    test_rate, test_q = np.asarray(test_rate, float), np.asarray(test_q, float)
    if len(anchor_rate) < 4 or len(test_rate) < 4:
        raise ValueError("BD-rate needs at least 4 points per curve")
    lo = max(anchor_q.min(), test_q.min())
    hi = min(anchor_q.max(), test_q.max())
    if not hi > lo:
        raise ValueError("RD curves have no overlapping quality range")
    pa = np.polyint(np.polyfit(anchor_q, np.log10(anchor_rate), 3))
    pt = np.polyint(np.polyfit(test_q, np.log10(test_rate), 3))
    area_a = np.polyval(pa, hi) - np.polyval(pa, lo)
    area_t = np.polyval(pt, hi) - np.polyval(pt, lo)
    delta = (area_t - area_a) / (hi - lo)
    return float(100.0 * (10.0 ** delta - 1.0))


def bd_rate(anchor: RDCurve, test: RDCurve, quality: str = "psnr") -> float:
    """Average rate difference (percent) of ``test`` against ``anchor`` at equal quality."""
    if quality not in ("psnr", "ms_ssim"):
        raise ConfigError(f"unknown quality metric {quality!r}")
    return bd_rate_arrays(*anchor.arrays(quality), *test.arrays(quality))


def read_rd_csv(path: str | os.PathLike) -> list[RDCurve]:
    """Read ``label, bpp, psnr, ms_ssim`` rows into one curve per label."""
    groups: dict[str, list[RDPoint]] = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            row = [c.strip() for c in row]
            if not row or row[0].startswith("#") or row[0].lower() == "label":
                continue
            if len(row) != 4:
                raise ValueError(f"{path}: expected 4 columns, got {row}")
            groups.setdefault(row[0], []).append(RDPoint(float(row[1]), float(row[2]), float(row[3])))
    return [RDCurve(label, pts) for label, pts in groups.items()]


def write_rd_csv(curves: Sequence[RDCurve], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "bpp", "psnr", "ms_ssim"])
        for c in curves:
            for p in c.points:
                w.writerow([c.label, repr(p.bpp), repr(p.psnr_db), repr(p.ms_ssim)])
