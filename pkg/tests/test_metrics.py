import math

import numpy as np
import pytest
import torch

from msnerv.metrics import (
    RDCurve,
    RDPoint,
    bd_rate,
    bd_rate_arrays,
    ms_ssim,
    ms_ssim_scales,
    psnr,
    read_rd_csv,
    write_rd_csv,
)


def test_psnr_known_values():
    a = np.zeros((2, 4, 4, 3))
    assert psnr(a + 0.1, a) == pytest.approx(20.0, abs=1e-12)
    assert psnr(a, a) == 100.0
    with pytest.raises(ValueError):
        psnr(a, np.zeros((1, 4, 4, 3)))


def test_ms_ssim_identity_and_degradation():
    g = np.random.default_rng(0)
    x = g.random((2, 48, 96, 3))
    assert ms_ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    noisy = np.clip(x + 0.1 * g.standard_normal(x.shape), 0, 1)
    assert ms_ssim(noisy, x) < 1.0


def test_ms_ssim_matches_reference_five_scales():
    pytorch_msssim = pytest.importorskip("pytorch_msssim")
    g = torch.Generator().manual_seed(1)
    x = torch.rand(1, 3, 176, 200, generator=g, dtype=torch.float64)
    y = (x + 0.1 * torch.randn(x.shape, generator=g, dtype=torch.float64)).clamp(0, 1)
    ref = float(pytorch_msssim.ms_ssim(x, y, data_range=1.0))
    ours = ms_ssim(x[0].permute(1, 2, 0), y[0].permute(1, 2, 0))
    assert abs(ours - ref) <= 1e-4


def test_ms_ssim_scale_rule():
    assert ms_ssim_scales(1080, 1920) == 5
    assert ms_ssim_scales(161, 161) == 5
    assert ms_ssim_scales(160, 400) == 4
    assert ms_ssim_scales(48, 96) == 3
    with pytest.raises(ValueError):
        ms_ssim_scales(8, 8)


def _curve(label, rates, q):
    return RDCurve(label, [RDPoint(r, p, 0.9 + 0.001 * p) for r, p in zip(rates, q)])


def test_bd_rate_identical_curves_is_zero():
    c = _curve("a", [0.1, 0.2, 0.4, 0.8], [30.0, 32.5, 34.0, 36.2])
    assert bd_rate(c, c) == 0.0


def test_bd_rate_doubled_rate_is_plus_100():
    q = [30.0, 32.5, 34.0, 36.2]
    a = _curve("a", [0.1, 0.2, 0.4, 0.8], q)
    b = _curve("b", [0.2, 0.4, 0.8, 1.6], q)
    assert abs(bd_rate(a, b) - 100.0) <= 1e-9
    assert abs(bd_rate(b, a) + 50.0) <= 1e-9


def test_bd_rate_analytic_polynomials():
    # log10 R is an exact cubic in quality on both curves
    pa = np.array([2e-4, -0.01, 0.3, -4.0])
    pt = np.array([-1e-4, 0.02, -0.5, 3.0])
    qa = np.array([28.0, 31.0, 34.0, 37.0, 40.0])
    qt = np.array([30.0, 32.0, 35.0, 38.0, 42.0])
    ra = 10 ** np.polyval(pa, qa)
    rt = 10 ** np.polyval(pa + pt, qt)
    lo, hi = 30.0, 40.0
    ip = np.polyint(pt)
    delta = (np.polyval(ip, hi) - np.polyval(ip, lo)) / (hi - lo)
    expected = 100 * (10 ** delta - 1)
    assert abs(bd_rate_arrays(ra, qa, rt, qt) - expected) <= 1e-6


def test_bd_rate_errors():
    with pytest.raises(ValueError):
        bd_rate_arrays([1, 2, 3], [1, 2, 3], [1, 2, 3], [1, 2, 3])
    with pytest.raises(ValueError):
        bd_rate_arrays([1, 2, 3, 4], [1, 2, 3, 4], [1, 2, 3, 4], [10, 11, 12, 13])


def test_rd_point_validation_and_monotonic_warning():
    with pytest.raises(ValueError):
        RDPoint(0.0, 30.0, 0.9)
    with pytest.raises(ValueError):
        RDPoint(0.1, math.nan, 0.9)
    with pytest.warns(UserWarning):
        _curve("x", [0.1, 0.2, 0.3, 0.4], [30.0, 29.0, 31.0, 32.0])


def test_rd_csv_round_trip(tmp_path):
    curves = [_curve("anchor", [0.1, 0.2, 0.4, 0.8], [30, 32, 34, 36]),
              _curve("test", [0.1, 0.2, 0.4, 0.8], [31, 33, 35, 37])]
    p = tmp_path / "rd.csv"
    write_rd_csv(curves, p)
    back = read_rd_csv(p)
    assert [c.label for c in back] == ["anchor", "test"]
    assert back[1].arrays()[1].tolist() == [31, 33, 35, 37]
