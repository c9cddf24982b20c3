"""Scale-adaptive training loss with high-frequency boosting.

Every tensor here is NCHW with three colour channels. Pyramid targets are
ordered coarsest first and aligned with the *top* decoder levels, so a
pyramid shallower than the decoder simply leaves the lowest decoder levels
unsupervised.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F

from msnerv.errors import ConfigError
from msnerv.metrics import gaussian_window, ms_ssim_nchw, ms_ssim_scales

SUM_TOL = 1e-9
MSSSIM_FLOOR = 1e-6


@dataclass(frozen=True)
class SALossConfig:
    alpha: tuple[float, ...] = (0.9, 0.8, 0.7, 0.6)
    beta: tuple[float, ...] = (0.1, 0.2, 0.3, 0.3)
    hpf_kernel: int = 5
    hpf_sigma: float = 1.0
    hpf_tau: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if len(self.alpha) != len(self.beta) or not self.alpha:
            raise ConfigError("loss.alpha and loss.beta must be non-empty and equally long")
        n = len(self.alpha)
        for r, (a, b) in enumerate(zip(self.alpha, self.beta), start=1):
            if not (0.0 <= a <= 1.0 and 0.0 <= b <= 1.0):
                raise ConfigError(f"level {r}: coefficients must lie in [0, 1], got alpha={a}, beta={b}")
            if r < n and abs(a + b - 1.0) > SUM_TOL:
                raise ConfigError(f"level {r}: alpha + beta must equal 1 below full resolution, got {a + b}")
            if r == n and a + b > 1.0 + SUM_TOL:
                raise ConfigError(f"full-resolution alpha + beta must not exceed 1, got {a + b}")
        if self.hpf_kernel < 1 or self.hpf_kernel % 2 == 0:
            raise ConfigError("loss.hpf.kernel must be a positive odd integer")
        if self.hpf_tau < 0:
            raise ConfigError("loss.hpf.tau must be >= 0")

    @property
    def num_levels(self) -> int:
        return len(self.alpha)

    def coefficients(self, level: int, num_levels: int | None = None) -> tuple[float, float]:
        """``(alpha, beta)`` for pyramid level ``level`` of ``num_levels`` (top-aligned)."""
        num_levels = num_levels or self.num_levels
        if num_levels > self.num_levels:
            raise ConfigError(f"{num_levels} levels supervised but only {self.num_levels} coefficient pairs")
        i = self.num_levels - num_levels + level - 1
        return self.alpha[i], self.beta[i]


def ssim_weight(alpha: float, beta: float) -> float:
    w = 1.0 - alpha - beta
    return 0.0 if abs(w) <= SUM_TOL else w


def high_pass(x: torch.Tensor, kernel: int = 5, sigma: float = 1.0) -> torch.Tensor:
    """``x - gaussian_blur(x)`` per channel with edge replication."""
    c = x.shape[1]
    g = gaussian_window(kernel, sigma, dtype=x.dtype)
    k2 = torch.outer(g, g).view(1, 1, kernel, kernel).repeat(c, 1, 1, 1)
    p = kernel // 2
    blurred = F.conv2d(F.pad(x, (p, p, p, p), mode="replicate"), k2, groups=c)
    return x - blurred


def high_freq_boost(target: torch.Tensor, recon: torch.Tensor, cfg: SALossConfig = SALossConfig()) -> torch.Tensor:
    """Reference with the high-passed reconstruction residual added back.

    ``recon`` is detached; filtered magnitudes below ``hpf_tau`` are dropped.
    """
    residual = (target - recon.detach()).abs()
    hf = high_pass(residual, cfg.hpf_kernel, cfg.hpf_sigma)
    if cfg.hpf_tau > 0:
        hf = torch.where(hf.abs() >= cfg.hpf_tau, hf, torch.zeros_like(hf))
    return (target + hf).clamp(0.0, 1.0)


def _masked_mean(x: torch.Tensor, valid: torch.Tensor | None) -> torch.Tensor:
    if valid is None:
        return x.mean()
    valid = valid.to(x.dtype).expand_as(x)
    return (x * valid).sum() / valid.sum().clamp(min=1.0)


def sa_loss(pred: torch.Tensor, ref: torch.Tensor, alpha: float, beta: float,
            valid: torch.Tensor | None = None, scales: int | None = None) -> tuple[torch.Tensor, dict]:
    """``alpha * MSE + beta * L1 + (1 - alpha - beta) * (1 - MS-SSIM)``.

    The MS-SSIM term is never evaluated when its weight is zero.
    ``valid`` is an optional ``[B, 1, H, W]`` 0/1 map of pixels that count.
    """
    diff = pred - ref
    mse = _masked_mean(diff * diff, valid)
    l1 = _masked_mean(diff.abs(), valid)
    loss = alpha * mse + beta * l1
    parts = {"mse": float(mse.detach()), "l1": float(l1.detach()), "ms_ssim": None, "ms_ssim_scales": 0}
    w = ssim_weight(alpha, beta)
    if w > 0:
        if scales is None:
            scales = ms_ssim_scales(*pred.shape[-2:])
        ms = ms_ssim_nchw(pred, ref, scales, floor=MSSSIM_FLOOR).mean()
        loss = loss + w * (1.0 - ms)
        parts["ms_ssim"] = float(ms.detach())
        parts["ms_ssim_scales"] = scales
    parts["loss"] = float(loss.detach())
    return loss, parts


@dataclass
class LossReport:
    total: torch.Tensor
    levels: list[dict] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"total": float(self.total), "levels": self.levels}


def total_loss(state, targets: Sequence[torch.Tensor], cfg: SALossConfig = SALossConfig(),
               boost: bool = True, mrs: bool = True, masks: Sequence[torch.Tensor] | None = None) -> LossReport:
    """Sum of per-level scale-adaptive losses.

    Args:
        state: a train-mode ``DecoderState``.
        targets: pyramid slices, coarsest first, last one at full resolution.
        boost: use the high-frequency boosted reference at full resolution.
        mrs: supervise intermediate levels through the MRS projections.
        masks: optional per-level ``[B, 1, h, w]`` maps, 1 where pixels are excluded.
    """
    num = len(targets)
    n_dec = len(state.features)
    if num > n_dec:
        raise ConfigError(f"{num} pyramid levels but only {n_dec} decoder levels")
    supervised = range(1, num + 1) if mrs else [num]
    total = None
    levels = []
    for p in supervised:
        alpha, beta = cfg.coefficients(p, num)
        ref = targets[p - 1]
        if p == num:
            pred = state.output
        else:
            dec_level = n_dec - num + p
            if len(state.projections) < dec_level:
                raise ValueError("decoder state lacks MRS projections; decode with train_mode=True")
            pred = state.projections[dec_level - 1]
        valid = None
        if masks is not None:
            m = masks[p - 1].to(torch.bool)
            ref = torch.where(m, pred.detach(), ref)
            valid = (~m).to(pred.dtype)
        if p == num and boost:
            ref = high_freq_boost(ref, pred, cfg)
            if masks is not None:
                ref = torch.where(m, pred.detach(), ref)
        loss, parts = sa_loss(pred, ref, alpha, beta, valid)
        if not torch.isfinite(loss):
            parts["non_finite"] = True
        parts.update(level=p, alpha=alpha, beta=beta)
        levels.append(parts)
        total = loss if total is None else total + loss
    return LossReport(total, levels)


def downscale_mask(mask: torch.Tensor, levels: int) -> list[torch.Tensor]:
    """Max-pool a full-resolution exclusion mask down a pyramid (coarsest first)."""
    out = [mask]
    for _ in range(levels - 1):
        out.append(F.max_pool2d(out[-1], 2, 2))
    return out[::-1]
