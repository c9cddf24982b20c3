import pytest
import torch

from conftest import finite_difference, relative_error
from msnerv.decoder import DecoderState
from msnerv.errors import ConfigError
from msnerv.objective import (
    SALossConfig,
    downscale_mask,
    high_freq_boost,
    high_pass,
    sa_loss,
    ssim_weight,
    total_loss,
)


def test_coefficient_table_defaults():
    cfg = SALossConfig()
    assert cfg.alpha == (0.9, 0.8, 0.7, 0.6)
    assert cfg.beta == (0.1, 0.2, 0.3, 0.3)
    assert [cfg.coefficients(r) for r in (1, 2, 3, 4)] == [(0.9, 0.1), (0.8, 0.2), (0.7, 0.3), (0.6, 0.3)]
    # shallow pyramids use the top rows of the table
    assert cfg.coefficients(1, 2) == (0.7, 0.3) and cfg.coefficients(2, 2) == (0.6, 0.3)


@pytest.mark.parametrize("alpha,beta", [
    ((0.9, 0.8, 0.7, 0.6), (0.2, 0.2, 0.3, 0.3)),
    ((0.9, 0.8), (0.1, 0.3)),
    ((1.2, 0.8), (0.0, 0.2)),
    ((0.9,), (0.1, 0.2)),
])
def test_coefficient_contract_violations(alpha, beta):
    with pytest.raises(ConfigError):
        SALossConfig(alpha, beta)


def test_ssim_weight_snaps_to_zero():
    assert ssim_weight(0.9, 0.1) == 0.0
    assert ssim_weight(0.6, 0.3) == pytest.approx(0.1)


def test_level_one_hand_computed_case():
    pred = torch.full((1, 3, 4, 4), 0.1, dtype=torch.float64)
    ref = torch.zeros_like(pred)
    a, b = SALossConfig().coefficients(1)
    loss, parts = sa_loss(pred, ref, a, b)
    assert abs(float(loss) - 0.019) <= 1e-12
    assert parts["ms_ssim"] is None


def test_ms_ssim_term_matches_reference():
    pytorch_msssim = pytest.importorskip("pytorch_msssim")
    g = torch.Generator().manual_seed(3)
    ref = torch.rand(2, 3, 192, 192, generator=g, dtype=torch.float64)
    pred = (ref + 0.05 * torch.randn(ref.shape, generator=g, dtype=torch.float64)).clamp(0, 1)
    loss, parts = sa_loss(pred, ref, 0.6, 0.3)
    oracle = float(pytorch_msssim.ms_ssim(pred, ref, data_range=1.0, size_average=True))
    assert abs(parts["ms_ssim"] - oracle) <= 1e-4
    mse = float(((pred - ref) ** 2).mean())
    l1 = float((pred - ref).abs().mean())
    assert float(loss) == pytest.approx(0.6 * mse + 0.3 * l1 + 0.1 * (1 - oracle), abs=1e-5)


def test_small_images_fall_back_to_fewer_scales():
    x = torch.rand(1, 3, 48, 96, dtype=torch.float64)
    _, parts = sa_loss(x * 0.9, x, 0.6, 0.3)
    assert parts["ms_ssim_scales"] == 3


def test_high_pass_is_dc_free():
    x = torch.full((1, 3, 9, 9), 0.37, dtype=torch.float64)
    assert high_pass(x).abs().max() <= 1e-15


def test_boost_is_identity_for_perfect_recon():
    x = torch.rand(1, 3, 12, 12, dtype=torch.float64)
    assert torch.equal(high_freq_boost(x, x.clone()), x)


def test_boost_detaches_reconstruction():
    x = torch.rand(1, 3, 12, 12, dtype=torch.float64)
    r = torch.rand(1, 3, 12, 12, dtype=torch.float64, requires_grad=True)
    out = high_freq_boost(x, r)
    assert not out.requires_grad


def test_boost_threshold_drops_small_responses():
    x = torch.rand(1, 3, 12, 12, dtype=torch.float64)
    r = x + 0.01 * torch.randn_like(x)
    huge = SALossConfig(hpf_tau=10.0)
    assert torch.equal(high_freq_boost(x, r, huge), x)


def test_sa_loss_gradient_matches_finite_differences():
    g = torch.Generator().manual_seed(5)
    ref = torch.rand(1, 3, 16, 16, generator=g, dtype=torch.float64)
    pred = (ref + 0.1 * torch.randn(ref.shape, generator=g, dtype=torch.float64)).requires_grad_(True)
    assert pred.numel() <= 1000

    def f():
        return sa_loss(pred, ref, 0.6, 0.3)[0]

    f().backward()
    with torch.no_grad():
        assert relative_error(pred.grad, finite_difference(f, pred)) <= 1e-4


def test_boost_gradient_matches_finite_differences():
    g = torch.Generator().manual_seed(6)
    target = (0.3 + 0.4 * torch.rand(1, 3, 10, 10, generator=g, dtype=torch.float64)).requires_grad_(True)
    recon = target.detach() - 0.05 - 0.02 * torch.rand(target.shape, generator=g, dtype=torch.float64)
    w = torch.randn(target.shape, generator=g, dtype=torch.float64)

    def f():
        return (high_freq_boost(target, recon) * w).sum()

    f().backward()
    with torch.no_grad():
        assert relative_error(target.grad, finite_difference(f, target)) <= 1e-4


def _state(levels, batch=1, requires_grad=True):
    feats = [torch.zeros(batch, 1, h, w) for h, w in levels]
    projs = [torch.rand(batch, 3, h, w, dtype=torch.float64, requires_grad=requires_grad) for h, w in levels[:-1]]
    out = torch.rand(batch, 3, *levels[-1], dtype=torch.float64, requires_grad=requires_grad)
    return DecoderState(feats, projs, out)


def test_total_loss_levels_and_mrs_toggle():
    state = _state([(6, 6), (12, 12), (24, 24), (48, 48)])
    targets = [torch.rand(1, 3, s, s, dtype=torch.float64) for s in (12, 24, 48)]
    rep = total_loss(state, targets)
    assert [lv["level"] for lv in rep.levels] == [1, 2, 3]
    assert [(lv["alpha"], lv["beta"]) for lv in rep.levels] == [(0.8, 0.2), (0.7, 0.3), (0.6, 0.3)]
    only_top = total_loss(state, targets, mrs=False)
    assert [lv["level"] for lv in only_top.levels] == [3]


def test_total_loss_needs_projections():
    state = _state([(6, 6), (12, 12)])
    state.projections = []
    with pytest.raises(ValueError, match="projections"):
        total_loss(state, [torch.rand(1, 3, 6, 6), torch.rand(1, 3, 12, 12)])


def test_downscale_mask_centred_square():
    m = torch.zeros(1, 1, 1080, 1920)
    m[..., 480:600, 900:1020] = 1
    levels = downscale_mask(m, 4)
    assert [tuple(x.shape[-2:]) for x in levels] == [(135, 240), (270, 480), (540, 960), (1080, 1920)]
    l3 = levels[2][0, 0]
    rows, cols = torch.nonzero(l3, as_tuple=True)
    assert (int(rows.min()), int(rows.max()) + 1, int(cols.min()), int(cols.max()) + 1) == (240, 300, 450, 510)


def test_masked_target_pixels_get_zero_gradient():
    sizes = [(6, 12), (12, 24), (24, 48)]
    state = _state(sizes)
    targets = [torch.rand(1, 3, h, w, dtype=torch.float64, requires_grad=True) for h, w in sizes]
    mask = torch.zeros(1, 1, 24, 48, dtype=torch.float64)
    mask[..., 8:16, 16:32] = 1
    masks = downscale_mask(mask, 3)
    rep = total_loss(state, targets, masks=masks)
    rep.total.backward()
    for t, m in zip(targets, masks):
        g = t.grad * m
        assert torch.count_nonzero(g) == 0
        assert torch.count_nonzero(t.grad * (1 - m)) > 0
    # changing masked target content leaves the loss unchanged
    with torch.no_grad():
        moved = [t + m * 0.5 for t, m in zip(targets, masks)]
    assert float(total_loss(state, moved, masks=masks).total.detach()) == float(rep.total.detach())
