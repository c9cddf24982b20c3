"""Per-tensor symmetric quantization and its straight-through fake-quant."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


def qmax(bits: int) -> int:
    return 2 ** (bits - 1) - 1


def tensor_scale(w: torch.Tensor, bits: int) -> float:
    """``max|w| / (2^(b-1) - 1)``, or 1 for an all-zero tensor (as a float32 value)."""
    m = float(w.detach().abs().max()) if w.numel() else 0.0
    if m == 0.0:
        return 1.0
    return float(np.float32(m / qmax(bits)))


def quantize_tensor(w: torch.Tensor, bits: int, scale: float | None = None) -> tuple[torch.Tensor, float]:
    """Integer lattice indices (as floats of ``w``'s dtype) and the scale used."""
    if scale is None:
        scale = tensor_scale(w, bits)
    s = torch.tensor(scale, dtype=w.dtype)
    q = torch.clamp(torch.round(w.detach() / s), -qmax(bits) - 1, qmax(bits))
    return q, scale


def fake_quantize(w: torch.Tensor, bits: int, scale: float | None = None) -> torch.Tensor:
    """Round ``w`` onto its quantization lattice; gradients pass straight through."""
    q, scale = quantize_tensor(w, bits, scale)
    wq = q * torch.tensor(scale, dtype=w.dtype)
    return w + (wq - w).detach()


@dataclass
class QuantizedTensor:
    name: str
    integers: np.ndarray
    scale: float
    bit_depth: int
    zero_point: int = 0

    def __post_init__(self):
        self.integers = np.asarray(self.integers, dtype=np.int64)
        lo, hi = -(2 ** (self.bit_depth - 1)), 2 ** (self.bit_depth - 1) - 1
        if self.integers.size and (self.integers.min() < lo or self.integers.max() > hi):
            raise ValueError(f"{self.name}: integers outside [{lo}, {hi}]")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.integers.shape)

    def dequantize(self, dtype=np.float32) -> np.ndarray:
        s = np.asarray(self.scale, dtype=dtype)
        return (self.integers - self.zero_point).astype(dtype) * s
