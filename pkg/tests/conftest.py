import numpy as np
import pytest
import torch

from msnerv.config import RunConfig

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def tiny_config(**overrides) -> RunConfig:
    """A small model for 24-pixel-stride frames that trains in seconds."""
    cfg = RunConfig()
    cfg.encoder.channels = 8
    cfg.decoder.fusion_depth = [1, 1, 1, 1]
    cfg.decoder.channels_min = 4
    cfg.train.epochs = 2
    cfg.train.qat_epochs = 1
    for k, v in overrides.items():
        cfg.set(k.replace("__", "."), v)
    cfg.validate()
    return cfg


def finite_difference(fn, tensor: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central differences of the scalar ``fn()`` w.r.t. every entry of ``tensor`` (modified in place)."""
    grad = torch.zeros_like(tensor)
    flat = tensor.data.view(-1)
    g = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        up = float(fn())
        flat[i] = orig - eps
        down = float(fn())
        flat[i] = orig
        g[i] = (up - down) / (2 * eps)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / denom


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _deterministic():
    torch.manual_seed(0)
    yield


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, msg = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {msg}")
