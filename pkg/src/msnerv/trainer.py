"""Fitting, quantization-aware fine-tuning and ablation variants."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.func import functional_call

from msnerv.codec.quant import fake_quantize, quantize_tensor, tensor_scale
from msnerv.config import VARIANTS, RunConfig
from msnerv.errors import ConfigError, TrainingDiverged
from msnerv.metrics import mse_to_psnr
from msnerv.model import MSNeRV, build_model, count_parameters
from msnerv.objective import downscale_mask, total_loss
from msnerv.serialization import load_arrays, save_arrays
from msnerv.video_io import ResolutionPyramid, iter_batches

logger = logging.getLogger(__name__)

PARITY_TOL = 0.02


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------- variants

def _variant_flags(cfg: RunConfig, variant: str) -> RunConfig:
    cfg = RunConfig.from_dict(cfg.to_dict())
    cfg.train.variant = variant
    if variant == "V1":
        cfg.encoder.temporal = False
    elif variant == "V2":
        cfg.loss.mrs = False
    elif variant == "V3":
        cfg.loss.boost = False
    elif variant == "V4":
        cfg.decoder.upsample = "bilinear"
    elif variant == "V5":
        cfg.decoder.upsample = "shuffle"
    elif variant == "V6":
        cfg.decoder.fusion = "conv_mlp"
    elif variant == "V7":
        cfg.decoder.cross_depth = False
    return cfg


def apply_variant(cfg: RunConfig, variant: str, dims: tuple[int, int, int] | None = None) -> RunConfig:
    """Config for an ablation variant, with C0 (and if needed C_min) retuned for parameter parity.

    ``dims`` is ``(T, H, W)``; without it the channel width is left unchanged.
    V1 drops the temporal window and GoP grids, V2 the multi-resolution
    supervision, V3 the high-frequency boosting; V4/V5 use bilinear-only /
    pixel-shuffle-only upsampling, V6 swaps fusion layers for conv3x3 + MLP
    and V7 removes cross-depth fusion.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    base = _variant_flags(cfg, "FULL")
    out = _variant_flags(cfg, variant)
    if dims is None or variant == "FULL":
        return out
    target = count_parameters(base, *dims)
    c0, cmin = base.encoder.channels, base.decoder.channels_min

    def size(c, m):
        out.encoder.channels, out.decoder.channels_min = c, m
        try:
            return count_parameters(out, *dims)
        except ConfigError:
            return None

    # C0 alone barely moves the decoder once widths sit at C_min, so C_min is
    # searched too, nearest to the configured value first
    best = None
    for m in sorted(range(max(2, cmin - 6), cmin + 7), key=lambda m: (abs(m - cmin), m)):
        lo, hi = max(2, c0 // 2), 2 * c0
        while hi - lo > 1:  # the count grows with C0
            mid = (lo + hi) // 2
            n = size(mid, m)
            if n is not None and n > target:
                hi = mid
            else:
                lo = mid
        for c in (lo, hi):
            n = size(c, m)
            if n is None:
                continue
            err = abs(n - target) / target
            if best is None or err < best[0] - 1e-12:
                best = (err, c, m)
        if best is not None and best[0] <= PARITY_TOL:
            break
    err, out.encoder.channels, out.decoder.channels_min = best
    if err > PARITY_TOL:
        logger.warning("variant %s: best parameter parity %.2f%% exceeds %.0f%%", variant, 100 * err, 100 * PARITY_TOL)
    return out


# ---------------------------------------------------------------- logging / checkpoints

@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    path: Path | None = None

    def append(self, rec: dict) -> None:
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @property
    def final_psnr(self) -> float | None:
        return self.records[-1]["psnr"] if self.records else None


def parameter_checksum(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in model.state_dict().items():
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(model: MSNeRV, path, cfg: RunConfig, extra: dict | None = None) -> None:
    arrays = {n: p.detach().cpu().numpy() for n, p in model.state_dict().items()}
    meta = {
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "dims": [model.num_frames, model.height, model.width],
        "qat": getattr(model, "qat_state", None),
    }
    meta.update(extra or {})
    save_arrays(path, arrays, meta)


def load_checkpoint(path) -> tuple[MSNeRV, RunConfig, dict]:
    arrays, meta = load_arrays(path)
    cfg = RunConfig.from_dict(meta["config"])
    t, h, w = meta["dims"]
    dtype = torch.from_numpy(next(iter(arrays.values()))).dtype
    model = build_model(cfg, t, h, w, dtype=dtype)
    model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    if meta.get("qat"):
        model.qat_state = meta["qat"]
    return model, cfg, meta


# ---------------------------------------------------------------- training loop

def lr_at(step: int, total: int, base: float, min_lr: float, warmup: float) -> float:
    """Linear warmup then cosine decay to ``min_lr``."""
    warm = max(1, int(round(warmup * total)))
    if step < warm:
        return base * (step + 1) / warm
    progress = (step - warm) / max(1, total - warm)
    return min_lr + 0.5 * (base - min_lr) * (1 + math.cos(math.pi * min(1.0, progress)))


def _pyramid_tensors(pyramid: ResolutionPyramid, dtype) -> list[torch.Tensor]:
    return [torch.from_numpy(np.ascontiguousarray(l)).permute(0, 3, 1, 2).to(dtype) for l in pyramid.levels]


def _fake_quant_params(model: MSNeRV, bits: int) -> dict:
    params = dict(model.named_parameters())
    for name, p in model.decodable_parameters():
        params[name] = fake_quantize(p, bits)
    return params


def train(model: MSNeRV, pyramid: ResolutionPyramid, cfg: RunConfig, run_dir=None, *,
          epochs: int | None = None, lr: float | None = None, qat_bits: int | None = None,
          mask: torch.Tensor | None = None, log: TrainLog | None = None, tag: str = "train"):
    """Fit ``model`` to ``pyramid``.

    Args:
        mask: optional full-resolution ``[1, 1, H, W]`` exclusion mask (1 = ignored).
        qat_bits: forward passes use fake-quantized decodable weights.

    Returns:
        ``(model, TrainLog)``.
    """
    tc = cfg.train
    epochs = epochs if epochs is not None else tc.epochs
    base_lr = lr if lr is not None else tc.lr
    dtype = next(model.parameters()).dtype
    levels = _pyramid_tensors(pyramid, dtype)
    num_levels = len(levels)
    if num_levels > model.decoder.num_levels:
        raise ConfigError(f"pyramid has {num_levels} levels but the decoder only {model.decoder.num_levels}")
    sa_cfg = cfg.sa_loss()
    masks = downscale_mask(mask.to(dtype), num_levels) if mask is not None else None
    run_dir = Path(run_dir) if run_dir is not None else None
    ckpt_dir = None
    if run_dir is not None:
        ckpt_dir = run_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    if log is None:
        log = TrainLog(path=(run_dir / "train_log.jsonl") if run_dir is not None else None)

    patch = cfg.data.patch_mode
    patch_size = tuple(cfg.data.patch_size) if patch else None
    batches_per_epoch = math.ceil(pyramid.num_frames / tc.batch_frames)
    total_steps = epochs * batches_per_epoch
    opt = torch.optim.Adam(model.parameters(), lr=base_lr)
    stream = iter_batches(pyramid, tc.batch_frames, epochs, patch, patch_size, tc.seed + (1 if qat_bits else 0),
                          stride=model.decoder.stride)
    n_params = model.num_decodable()
    step = 0
    last_good = None
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        sq_err, count = 0.0, 0
        level_sums: dict[int, float] = {}
        for _ in range(batches_per_epoch):
            batch = next(stream)
            for g in opt.param_groups:
                g["lr"] = lr_at(step, total_steps, base_lr, tc.min_lr, tc.warmup)
            idx = torch.tensor(batch.frame_indices) - 1
            targets = [l[idx] for l in levels]
            bmasks = masks
            if batch.windows is not None:
                targets = [x[..., a:a + h, b:b + w] for x, (a, b, h, w) in zip(targets, batch.windows)]
                if masks is not None:
                    bmasks = [m[..., a:a + h, b:b + w] for m, (a, b, h, w) in zip(masks, batch.windows)]
            t = torch.tensor(batch.frame_indices)
            if qat_bits:
                state = functional_call(model, _fake_quant_params(model, qat_bits), (t,),
                                        {"train_mode": True, "window": batch.top_window})
            else:
                state = model(t, train_mode=True, window=batch.top_window)
            report = total_loss(state, targets, sa_cfg, boost=cfg.loss.boost, mrs=cfg.loss.mrs, masks=bmasks)
            if not torch.isfinite(report.total):
                bad = [f"level {lv['level']}" for lv in report.levels if not math.isfinite(lv["loss"])]
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step} ({', '.join(bad) or 'unknown level'}); "
                    f"last good checkpoint: {last_good}",
                    level=bad[0] if bad else None, checkpoint=last_good)
            opt.zero_grad(set_to_none=True)
            report.total.backward()
            if tc.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
            opt.step()
            step += 1
            with torch.no_grad():
                out = state.output.detach().clamp(0, 1)
                err = (out - targets[-1]) ** 2
                if bmasks is not None:
                    err = err * (1 - bmasks[-1])
                    count += int((1 - bmasks[-1]).sum()) * 3
                else:
                    count += err.numel()
                sq_err += float(err.sum())
            for lv in report.levels:
                level_sums[lv["level"]] = level_sums.get(lv["level"], 0.0) + lv["loss"]
        rec = {
            "phase": tag,
            "epoch": epoch,
            "step": step,
            "psnr": mse_to_psnr(sq_err / max(count, 1)),
            "level_losses": {str(k): v / batches_per_epoch for k, v in sorted(level_sums.items())},
            "params": n_params,
            "checksum": parameter_checksum(model),
            "wall_time": time.perf_counter() - t0,
        }
        log.append(rec)
        if ckpt_dir is not None and (epoch % tc.checkpoint_every == 0 or epoch == epochs):
            last_good = ckpt_dir / "last.ckpt"
            save_checkpoint(model, last_good, cfg, {"epoch": epoch, "phase": tag})
    return model, log


def freeze_quantization(model: MSNeRV, bits: int) -> dict:
    """Project decodable weights onto their lattice and record the scales."""
    scales = {}
    with torch.no_grad():
        for name, p in model.decodable_parameters():
            scale = tensor_scale(p, bits)
            q, _ = quantize_tensor(p, bits, scale)
            p.copy_(q * torch.tensor(scale, dtype=p.dtype))
            scales[name] = scale
    model.qat_state = {"bits": bits, "scales": scales}
    return model.qat_state


def qat_finetune(model: MSNeRV, pyramid: ResolutionPyramid, cfg: RunConfig, bit_depth: int | None = None,
                 run_dir=None, epochs: int | None = None, mask=None, log: TrainLog | None = None):
    """Fine-tune with fake-quantized weights, then freeze weights onto the lattice."""
    bits = bit_depth or cfg.train.bits
    if not 4 <= bits <= 16:
        raise ConfigError(f"bit depth must lie in [4, 16], got {bits}")
    epochs = cfg.train.qat_epochs if epochs is None else epochs
    if epochs > 0:
        train(model, pyramid, cfg, run_dir, epochs=epochs, lr=cfg.train.qat_lr, qat_bits=bits, mask=mask,
              log=log, tag="qat")
    freeze_quantization(model, bits)
    return model


def fit(cfg: RunConfig, pyramid: ResolutionPyramid, run_dir=None, dtype=torch.float32, mask=None,
        with_qat: bool = True):
    """Seed, build, train and (optionally) QAT-finetune a model for ``pyramid``."""
    seed_everything(cfg.train.seed)
    t, h, w, _ = pyramid.levels[-1].shape
    model = build_model(cfg, t, h, w, dtype=dtype)
    model, log = train(model, pyramid, cfg, run_dir, mask=mask)
    float_model = copy.deepcopy(model)
    if with_qat:
        qat_finetune(model, pyramid, cfg, run_dir=run_dir, mask=mask, log=log)
    return model, float_model, log
