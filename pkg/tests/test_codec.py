import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_config
from msnerv.codec import (
    QuantizedTensor,
    bpp,
    compress_model,
    decompress_model,
    entropy_decode,
    entropy_encode,
    fake_quantize,
    histogram_entropy,
    param_entropy,
    quantize,
    quantize_tensor,
    tensor_scale,
)
from msnerv.codec.rangecoder import TOTAL, decode_symbols, encode_symbols, quantize_counts
from msnerv.errors import BitstreamError
from msnerv.model import build_model
from msnerv.trainer import freeze_quantization


def _qt(name, ints, bits=8, scale=0.01):
    return QuantizedTensor(name, np.asarray(ints, dtype=np.int64), scale, bits)


def test_quantize_counts_sum_and_floor():
    f = quantize_counts([1, 10 ** 6, 3])
    assert sum(f) == TOTAL and min(f) >= 1
    with pytest.raises(ValueError):
        quantize_counts([0, 0])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 9), min_size=1, max_size=400), st.lists(st.integers(1, 50), min_size=10, max_size=10))
def test_range_coder_round_trip(symbols, weights):
    freqs = quantize_counts(weights)
    data = encode_symbols(symbols, freqs)
    out, overrun = decode_symbols(data, freqs, len(symbols))
    assert out == symbols and not overrun


@pytest.mark.parametrize("dist", ["gauss", "skewed", "laplace"])
def test_payload_close_to_entropy(dist):
    g = np.random.default_rng(7)
    n = 20000
    if dist == "gauss":
        ints = np.clip(np.round(g.normal(0, 12, n)), -127, 127)
    elif dist == "laplace":
        ints = np.clip(np.round(g.laplace(0, 3, n)), -127, 127)
    else:
        ints = np.where(g.random(n) < 0.97, 0, g.integers(-3, 4, n))
    stream = entropy_encode([_qt("w", ints)])
    h = histogram_entropy(ints)
    assert stream.records[0].mode != 2
    assert stream.payload_bytes <= 1.02 * n * h / 8 + 64


def test_uniform_data_falls_back_to_raw():
    ints = np.random.default_rng(0).integers(-128, 128, 5000)
    stream = entropy_encode([_qt("w", ints)])
    assert stream.records[0].mode == 2
    _, back = entropy_decode(stream.data)
    assert np.array_equal(back[0].integers, ints)


def test_container_round_trip_is_bitwise():
    g = np.random.default_rng(1)
    tensors = [
        _qt("a.weight", np.round(g.normal(0, 20, (4, 3, 3))).clip(-127, 127)),
        _qt("b.bias", np.zeros(7, dtype=np.int64)),
        _qt("c.grid", np.round(g.normal(0, 300, (2, 5))).clip(-2047, 2047), bits=12, scale=1e-4),
        _qt("empty", np.zeros((0, 3), dtype=np.int64)),
    ]
    stream = entropy_encode(tensors, {"dims": [1, 2, 3]})
    header, back = entropy_decode(stream.data)
    assert header == {"dims": [1, 2, 3]}
    for a, b in zip(tensors, back):
        assert a.name == b.name and a.shape == b.shape and a.scale == b.scale and a.bit_depth == b.bit_depth
        assert np.array_equal(a.integers, b.integers)
    assert stream.total_bytes == stream.payload_bytes + stream.overhead_bytes


@pytest.mark.parametrize("damage", ["magic", "truncate", "flip", "short"])
def test_damaged_streams_raise(damage):
    ints = np.round(np.random.default_rng(2).normal(0, 10, 500)).clip(-127, 127)
    data = bytearray(entropy_encode([_qt("w", ints)]).data)
    if damage == "magic":
        data[:4] = b"NOPE"
    elif damage == "truncate":
        data = data[:-20]
    elif damage == "flip":
        data[len(data) // 2] ^= 0x40
    else:
        data = data[:10]
    with pytest.raises(BitstreamError) as exc:
        entropy_decode(bytes(data))
    assert exc.value.offset is not None and "byte offset" in str(exc.value)


def test_tensor_scale_and_lattice():
    w = torch.tensor([0.5, -1.27, 0.0, 0.3], dtype=torch.float64)
    s = tensor_scale(w, 8)
    assert s == float(np.float32(1.27 / 127))
    q, _ = quantize_tensor(w, 8)
    assert q.tolist() == [50.0, -127.0, 0.0, 30.0]
    assert tensor_scale(torch.zeros(3), 8) == 1.0


def test_fake_quantize_straight_through():
    w = torch.randn(20, dtype=torch.float64, requires_grad=True)
    fq = fake_quantize(w, 4)
    q, s = quantize_tensor(w, 4)
    assert torch.equal(fq.detach(), q * s)
    (fq * torch.arange(20.0, dtype=torch.float64)).sum().backward()
    assert torch.equal(w.grad, torch.arange(20.0, dtype=torch.float64))


def test_model_quantize_uses_frozen_scales_and_warns_otherwise():
    cfg = tiny_config()
    model = build_model(cfg, 4, 24, 48)
    with pytest.warns(UserWarning, match="not QAT"):
        quantize(model, 8)
    freeze_quantization(model, 8)
    tensors = quantize(model, 8)
    names = [n for n, _ in model.decodable_parameters()]
    assert [t.name for t in tensors] == names
    assert not any(n.startswith("decoder.mrs_heads") for n in names)
    for t, (_, p) in zip(tensors, model.decodable_parameters()):
        assert t.scale == model.qat_state["scales"][t.name]
        # frozen weights sit exactly on the lattice
        assert torch.equal(torch.from_numpy(t.dequantize(np.float32)), p.detach())


def test_compress_decompress_reconstruction_identical():
    cfg = tiny_config()
    model = build_model(cfg, 4, 24, 48)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.05 * torch.randn_like(p))
    freeze_quantization(model, 8)
    stream = compress_model(model, cfg, 8)
    restored, cfg2, header = decompress_model(stream.data)
    assert cfg2.digest() == cfg.digest() == header["config_hash"]
    assert torch.equal(restored.reconstruct(), model.reconstruct())
    assert bpp(stream, (4, 24, 48)) == 8 * stream.total_bytes / (4 * 24 * 48)


def test_param_entropy_reports():
    vals = np.random.default_rng(0).normal(0, 1, 10000)
    std, ent = param_entropy(vals)
    assert std == pytest.approx(1.0, abs=0.03)
    assert 0 < ent < 8
    assert param_entropy(np.zeros(10)) == (0.0, 0.0)
    tensors = [_qt("a", [0, 0, 1, -1])]
    assert param_entropy(tensors)[1] == pytest.approx(1.5)
