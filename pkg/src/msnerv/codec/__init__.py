"""Model compression: quantization, entropy coding and the .msnv container."""

from __future__ import annotations

import torch

from msnerv.codec.bitstream import (
    ModelBitstream,
    bpp,
    entropy_decode,
    entropy_encode,
    histogram_entropy,
    param_entropy,
    quantize,
)
from msnerv.codec.quant import QuantizedTensor, fake_quantize, quantize_tensor, tensor_scale
from msnerv.config import RunConfig
from msnerv.errors import BitstreamError

__all__ = [
    "ModelBitstream", "QuantizedTensor", "bpp", "compress_model", "decompress_model", "entropy_decode",
    "entropy_encode", "fake_quantize", "histogram_entropy", "param_entropy", "quantize", "quantize_tensor",
    "tensor_scale",
]


def compress_model(model, cfg: RunConfig, bit_depth: int = 8) -> ModelBitstream:
    header = {
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "dims": [model.num_frames, model.height, model.width],
        "bits": bit_depth,
    }
    return entropy_encode(quantize(model, bit_depth), header)


def decompress_model(data: bytes, dtype=torch.float32):
    """Rebuild a decoding-only model from a bitstream alone.

    Returns ``(model, config, header)``.
    """
    from msnerv.model import build_model

    header, tensors = entropy_decode(data)
    try:
        cfg = RunConfig.from_dict(header["config"])
        t, h, w = header["dims"]
    except KeyError as exc:
        raise BitstreamError(f"header lacks {exc}") from exc
    decode_cfg = RunConfig.from_dict(header["config"])
    decode_cfg.loss.mrs = False  # MRS heads are training-only
    model = build_model(decode_cfg, t, h, w, dtype=dtype)
    params = dict(model.decodable_parameters())
    if set(params) != {q.name for q in tensors}:
        missing = set(params) ^ {q.name for q in tensors}
        raise BitstreamError(f"tensor set does not match the architecture: {sorted(missing)[:5]}")
    with torch.no_grad():
        for q in tensors:
            p = params[q.name]
            if tuple(p.shape) != q.shape:
                raise BitstreamError(f"tensor {q.name}: shape {q.shape} != {tuple(p.shape)}")
            ints = torch.from_numpy(q.integers - q.zero_point).to(dtype)
            p.copy_(ints * torch.tensor(q.scale, dtype=dtype))
    model.qat_state = {"bits": header.get("bits"), "scales": {q.name: q.scale for q in tensors}}
    return model, cfg, header
