import numpy as np
import pytest
import torch
import torch.nn.functional as F

from conftest import finite_difference, relative_error
from msnerv.decoder import (
    ChannelNorm,
    FusionLayer,
    HybridUpsample,
    MSFBlock,
    SpatialDecoder,
    channel_schedule,
    decode_patch,
    interp_knots,
)
from msnerv.errors import ConfigError


def _randomise(module, scale=0.5):
    with torch.no_grad():
        for p in module.parameters():
            p.uniform_(-scale, scale)
    return module


def test_channel_schedule():
    assert channel_schedule(32, [3, 2, 2, 2]) == [12, 12, 12, 12]
    assert channel_schedule(96, [3, 2, 2, 2]) == [32, 16, 12, 12]
    assert channel_schedule(96, [3, 2, 2, 2], channels_min=4, growth=1.5) == [48, 36, 27, 21]


def test_shape_ladder_45x80():
    with torch.device("meta"):
        dec = SpatialDecoder(32, 4, factors=(3, 2, 2, 2))
        state = dec(torch.empty(1, 32, 45, 80), torch.tensor([1]))
    assert [tuple(f.shape[-2:]) for f in state.features] == [(135, 240), (270, 480), (540, 960), (1080, 1920)]
    assert tuple(state.output.shape) == (1, 3, 1080, 1920)


def test_interp_knots_endpoints_and_midpoints():
    g = torch.randn(3, 2, 2, 2, dtype=torch.float64)
    out = interp_knots(g, torch.tensor([1.0, 5.0, 9.0, 3.0]), 9)
    assert torch.equal(out[0], g[0]) and torch.equal(out[1], g[1]) and torch.equal(out[2], g[2])
    torch.testing.assert_close(out[3], (g[0] + g[1]) / 2)


def test_hybrid_upsample_composition_oracle():
    up = _randomise(HybridUpsample(3, 2, num_frames=5, mode="hybrid")).double()
    x = torch.randn(2, 3, 3, 4, dtype=torch.float64)
    t = torch.tensor([2, 5])
    got = up(x, t)
    bil = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
    shuf = F.pixel_shuffle(up.shuffle_proj(x), 2)
    gamma = interp_knots(up.local_grid, t, 5)
    tile = torch.zeros_like(bil)
    for i in range(6):
        for j in range(8):
            tile[:, :, i, j] = gamma[:, :, i % 2, j % 2]
    torch.testing.assert_close(got, bil + shuf + tile, rtol=0, atol=1e-12)


def test_hybrid_starts_as_bilinear_plus_local_grid():
    up = HybridUpsample(4, 3, num_frames=8).double()
    with torch.no_grad():
        up.local_grid.zero_()
    x = torch.randn(1, 4, 2, 2, dtype=torch.float64)
    torch.testing.assert_close(up(x, torch.tensor([1])), F.interpolate(x, scale_factor=3, mode="bilinear"))


def test_upsample_variants_structure():
    assert HybridUpsample(4, 2, 8, "bilinear").shuffle_proj is None
    sh = HybridUpsample(4, 2, 8, "shuffle")
    assert not sh.use_bilinear and sh.shuffle_proj is not None
    with pytest.raises(ConfigError):
        HybridUpsample(4, 2, 8, "nearest")


def test_channel_norm_normalises_channels():
    n = ChannelNorm(6).double()
    y = n(torch.randn(2, 6, 3, 3, dtype=torch.float64) * 4 + 2)
    torch.testing.assert_close(y.mean(1), torch.zeros(2, 3, 3, dtype=torch.float64), atol=1e-12, rtol=0)


def test_fusion_layer_oracle():
    layer = _randomise(FusionLayer(8, slice_ratio=0.25)).double()
    x = torch.randn(1, 8, 5, 5, dtype=torch.float64)
    n = layer.norm1(x)
    fused = F.conv2d(n, layer.dw3.weight, layer.dw3.bias, padding=1, groups=8) + \
        F.conv2d(n, layer.dw5.weight, layer.dw5.bias, padding=2, groups=8)
    m = layer.mlp(layer.norm2(fused))
    assert m.shape[1] == 2
    expected = x + torch.cat([fused[:, :6], m], 1)
    torch.testing.assert_close(layer(x), expected, rtol=0, atol=1e-12)


@pytest.mark.parametrize("kind", ["msf", "conv_mlp"])
def test_zero_fusion_weights_give_identity(kind):
    layer = _randomise(FusionLayer(6, kind=kind)).double()
    with torch.no_grad():
        last = layer.mlp[-1]
        last.weight.zero_()
        last.bias.zero_()
        if kind == "msf":
            for conv in (layer.dw3, layer.dw5):
                conv.weight.zero_()
                conv.bias.zero_()
    x = torch.randn(2, 6, 4, 4, dtype=torch.float64)
    assert torch.equal(layer(x), x)


def test_zero_cross_depth_projection_returns_last_tap():
    block = _randomise(MSFBlock(4, 6, 2, 3, num_frames=4)).double()
    with torch.no_grad():
        block.cross.weight.zero_()
        block.cross.bias.zero_()
    out, taps = block(torch.randn(1, 4, 3, 3, dtype=torch.float64), torch.tensor([2]))
    assert len(taps) == 3
    assert torch.equal(out, taps[-1])


def test_cross_depth_oracle():
    block = _randomise(MSFBlock(4, 6, 2, 2, num_frames=4)).double()
    x = torch.randn(1, 4, 3, 3, dtype=torch.float64)
    t = torch.tensor([3])
    h = block.channel_proj(block.upsample(x, t))
    t1 = block.layers[0](h)
    t2 = block.layers[1](t1)
    expected = t2 + F.conv2d(torch.cat([t1, t2], 1), block.cross.weight, block.cross.bias)
    torch.testing.assert_close(block(x, t)[0], expected, rtol=0, atol=1e-12)


def test_without_cross_depth_block_has_no_projection():
    block = MSFBlock(4, 6, 2, 2, num_frames=4, cross_depth=False)
    assert block.cross is None


def test_eval_output_clamped_and_train_mode_projections():
    dec = _randomise(SpatialDecoder(8, 4, factors=(2, 2), depths=2, channels_min=4), scale=3.0)
    grid = torch.randn(2, 8, 2, 3) * 10
    t = torch.tensor([1, 4])
    ev = dec(grid, t)
    assert ev.output.min() >= 0 and ev.output.max() <= 1
    assert ev.projections == []
    tr = dec(grid, t, train_mode=True)
    assert len(tr.projections) == 1 and tr.projections[0].shape == (2, 3, 4, 6)
    assert tr.output.shape == (2, 3, 8, 12)


def test_mrs_heads_optional():
    dec = SpatialDecoder(8, 4, factors=(2, 2), use_mrs=False)
    assert dec.mrs_heads is None
    assert dec(torch.randn(1, 8, 2, 2), torch.tensor([1]), train_mode=True).projections == []


def test_required_context_default_config():
    assert SpatialDecoder(32, 8).required_context() == 6


@pytest.mark.parametrize("window", [(0, 0, 24, 24), (24, 48, 48, 24), (72, 96, 24, 72)])
def test_decode_patch_matches_full_frame_crop(window):
    dec = _randomise(SpatialDecoder(8, 6, factors=(3, 2, 2, 2), depths=2, channels_min=6), scale=0.3)
    grid = torch.randn(2, 8, 5, 7)
    t = torch.tensor([2, 5])
    with torch.no_grad():
        full = dec(grid, t, train_mode=True)
        patch = decode_patch(dec, grid, t, window, train_mode=True)
    r0, c0, h, w = window
    assert patch.exact
    assert (patch.output - full.output[..., r0:r0 + h, c0:c0 + w]).abs().max() <= 1e-5
    for f, p, s in zip(full.features, patch.features, (3, 6, 12, 24)):
        a, b = r0 * s // 24, c0 * s // 24
        assert (p - f[..., a:a + h * s // 24, b:b + w * s // 24]).abs().max() <= 1e-5


def test_decode_patch_small_context_warns_and_is_inexact():
    dec = _randomise(SpatialDecoder(8, 6, factors=(3, 2, 2, 2), depths=2, channels_min=6), scale=0.3)
    grid = torch.randn(1, 8, 6, 6)
    with pytest.warns(UserWarning, match="not exact"):
        patch = decode_patch(dec, grid, torch.tensor([1]), (48, 48, 48, 48), context_cells=1)
    assert not patch.exact
    with pytest.raises(ConfigError):
        decode_patch(dec, grid, torch.tensor([1]), (5, 0, 24, 24))


def test_msf_block_gradients_match_finite_differences():
    block = _randomise(MSFBlock(3, 4, 2, 2, num_frames=4, slice_ratio=0.5, mlp_ratio=1.0), scale=0.4).double()
    x = torch.randn(1, 3, 2, 2, dtype=torch.float64, requires_grad=True)
    t = torch.tensor([2])
    w = torch.randn(1, 4, 4, 4, dtype=torch.float64)

    def f():
        return (block(x, t)[0] * w).sum()

    f().backward()
    with torch.no_grad():
        assert relative_error(x.grad, finite_difference(f, x)) <= 1e-4
        for name, p in block.named_parameters():
            assert p.numel() <= 1000
            assert relative_error(p.grad, finite_difference(f, p)) <= 1e-4, name


def test_decoder_rejects_wrong_channels():
    dec = SpatialDecoder(8, 4, factors=(2,))
    with pytest.raises(ConfigError):
        dec(torch.randn(1, 4, 2, 2), torch.tensor([1]))


def test_random_weights_patch_equality_is_numerically_tight():
    dec = _randomise(SpatialDecoder(8, 6, factors=(2, 2), depths=[1, 2], channels_min=4), scale=0.5).double()
    grid = torch.randn(1, 8, 6, 6, dtype=torch.float64)
    t = torch.tensor([3])
    full = dec(grid, t).output
    p = decode_patch(dec, grid, t, (8, 4, 8, 12)).output
    np.testing.assert_allclose(p.detach().numpy(), full[..., 8:16, 4:16].detach().numpy(), atol=1e-12)
