"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from msnerv.codec import bpp, compress_model, decompress_model, entropy_decode, param_entropy
from msnerv.config import VARIANTS, RunConfig, load_config, load_frozen, tomllib
from msnerv.errors import ConfigError, MSNeRVError
from msnerv.metrics import bd_rate, ms_ssim, psnr, read_rd_csv
from msnerv.tasks import MaskSpec, interpolate_frames, masked_psnr
from msnerv.trainer import TrainLog, apply_variant, fit, load_checkpoint, save_checkpoint
from msnerv.video_io import (
    FrameStore,
    VideoTensor,
    build_pyramid,
    load_frames,
    resize_frames,
    save_frames,
    synthetic_video,
    to_uint8,
)

logger = logging.getLogger("msnerv")

ABLATION_COLUMNS = ("Variant", "Size (M)", "bpp", "PSNR(dB)", "MS-SSIM")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- helpers

def _parse_hw(text: str) -> list[int]:
    parts = text.lower().split("x")
    try:
        vals = [int(p) for p in parts]
    except ValueError:
        raise ConfigError(f"expected HxW, got {text!r}") from None
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2:
        raise ConfigError(f"expected HxW, got {text!r}")
    return vals


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _resolve_config(args) -> RunConfig:
    """Config file, then ``--set`` overrides, then dedicated flags."""
    overrides = list(args.set or [])
    seed_given = args.seed is not None or any(o.split("=", 1)[0].strip() == "train.seed" for o in overrides)
    if args.config and not seed_given:
        with open(args.config, "rb") as fh:
            seed_given = "seed" in tomllib.load(fh).get("train", {})
    if args.input is not None:
        overrides.append(f"data.input={json.dumps(str(args.input))}")
    if args.levels is not None:
        overrides.append(f"data.levels={args.levels}")
    if args.patch_size is not None:
        overrides += ["data.patch_mode=true", f"data.patch_size={_parse_hw(args.patch_size)}"]
    if args.mask is not None:
        overrides.append(f"data.mask={_parse_hw(args.mask)}")
    if args.frames is not None:
        overrides.append(f"data.frames={json.dumps(args.frames)}")
    if getattr(args, "epochs", None) is not None:
        overrides.append(f"train.epochs={args.epochs}")
    if getattr(args, "qat_epochs", None) is not None:
        overrides.append(f"train.qat_epochs={args.qat_epochs}")
    if getattr(args, "bits", None) is not None:
        overrides.append(f"train.bits={args.bits}")
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    elif not seed_given and os.environ.get("MSNERV_SEED"):
        overrides.append(f"train.seed={int(os.environ['MSNERV_SEED'])}")
    cfg = load_config(args.config, overrides)
    if cfg.data.input is None:
        raise ConfigError("no input video: pass --input or set data.input")
    return cfg


def _load_training_video(cfg: RunConfig) -> tuple[VideoTensor, list[int], int]:
    """Frames used for fitting, their 1-based source indices and the source length."""
    src = Path(cfg.data.input)
    resize = tuple(cfg.data.resize) if cfg.data.resize else None
    if cfg.data.frames == "odd":
        if not src.is_dir():
            raise ConfigError("--frames odd needs a PNG frame directory")
        store = FrameStore(src)
        indices = list(range(1, len(store) + 1, 2))
        video = store.load(indices)
        if resize is not None:
            video = VideoTensor(resize_frames(video.frames, resize))
        video.check_stride()
        return video, indices, len(store)
    video = load_frames(src, resize)
    return video, list(range(1, video.num_frames + 1)), video.num_frames


def _mask_tensor(cfg: RunConfig, h: int, w: int):
    if not cfg.data.mask:
        return None, None
    spec = MaskSpec(*cfg.data.mask)
    if spec.height == 0 or spec.width == 0:
        return spec, None
    return spec, spec.tensor(h, w)


def _plot_psnr(log: TrainLog, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3))
    for phase in ("train", "qat"):
        recs = [r for r in log.records if r.get("phase") == phase]
        if recs:
            ax.plot([r["step"] for r in recs], [r["psnr"] for r in recs], label=phase)
    ax.set_xlabel("step")
    ax.set_ylabel("PSNR (dB)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _plot_rd(rows: list[dict], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3))
    for r in rows:
        ax.scatter([r["bpp"]], [r["PSNR(dB)"]], label=r["Variant"])
    ax.set_xlabel("bpp")
    ax.set_ylabel("PSNR (dB)")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _evaluate(model, ref: np.ndarray, mask_spec: MaskSpec | None = None) -> dict:
    """Quality of the 8-bit frames the model would be written out as."""
    recon = to_uint8(model.reconstruct().double().numpy()).astype(np.float64) / 255.0
    out = {"psnr": psnr(recon, ref), "ms_ssim": ms_ssim(recon, ref)}
    if mask_spec is not None and mask_spec.height and mask_spec.width:
        out["mask"] = masked_psnr(recon, ref, mask_spec)
    return out


def _run_training(cfg: RunConfig, run_dir: Path, variant: str) -> dict:
    """Fit one model into ``run_dir`` and return its report."""
    video, indices, source_frames = _load_training_video(cfg)
    t, h, w = video.shape
    cfg = apply_variant(cfg, variant, (t, h, w))
    cfg.validate()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.frozen").write_text(cfg.canonical() + "\n")
    (run_dir / "plots").mkdir(exist_ok=True)
    log_path = run_dir / "train_log.jsonl"
    if log_path.exists():
        log_path.unlink()
    pyramid = build_pyramid(video, cfg.data.levels, cfg.data.downsample)
    mask_spec, mask = _mask_tensor(cfg, h, w)
    model, float_model, log = fit(cfg, pyramid, run_dir, mask=mask, with_qat=True)
    ref = video.frames
    final = _evaluate(model, ref, mask_spec)
    float_eval = _evaluate(float_model, ref, mask_spec)
    log.path = log_path
    log.append({"phase": "final", "psnr": final["psnr"], "ms_ssim": final["ms_ssim"],
                "float_psnr": float_eval["psnr"]})
    save_checkpoint(model, run_dir / "checkpoints" / "final.ckpt", cfg, {"phase": "final"})
    std, ent = param_entropy(model, bits=cfg.train.bits)
    stream = compress_model(model, cfg, cfg.train.bits)
    report = {
        "variant": variant,
        "config_hash": cfg.digest(),
        "dims": [t, h, w],
        "frames": indices,
        "source_frames": source_frames,
        "levels": pyramid.num_levels,
        "params": model.num_decodable(),
        "bits": cfg.train.bits,
        "bytes": stream.total_bytes,
        "bpp": bpp(stream, (t, h, w)),
        "psnr": final["psnr"],
        "ms_ssim": final["ms_ssim"],
        "float_psnr": float_eval["psnr"],
        "qat_drop_db": float_eval["psnr"] - final["psnr"],
        "param_std": std,
        "param_entropy": ent,
    }
    if "mask" in final:
        report["mask_psnr"] = final["mask"]
    _dump_json(report, run_dir / "report.json")
    _plot_psnr(log, run_dir / "plots" / "psnr.png")
    return report


class _RunLock:
    def __init__(self, run_dir: Path):
        run_dir.mkdir(parents=True, exist_ok=True)
        self.lock = FileLock(str(run_dir / ".lock"))

    def __enter__(self):
        try:
            self.lock.acquire(timeout=0)
        except Timeout:
            raise MSNeRVError(f"run directory {self.lock.lock_file} is locked by another process") from None
        return self

    def __exit__(self, *exc):
        self.lock.release()
        Path(self.lock.lock_file).unlink(missing_ok=True)


def _load_run(run_dir: Path):
    ckpt = run_dir / "checkpoints" / "final.ckpt"
    if not ckpt.exists():
        raise MSNeRVError(f"{run_dir}: no final checkpoint (was training completed?)")
    model, cfg, meta = load_checkpoint(ckpt)
    frozen = run_dir / "config.frozen"
    if frozen.exists() and load_frozen(frozen).digest() != meta["config_hash"]:
        raise MSNeRVError(f"{run_dir}: checkpoint config hash does not match config.frozen")
    return model, cfg, meta


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    with _RunLock(out):
        report = _run_training(cfg, out, args.variant)
    print(f"psnr {report['psnr']:.4f} dB  ms-ssim {report['ms_ssim']:.5f}  "
          f"params {report['params']}  bpp {report['bpp']:.4f}")
    return 0


def cmd_compress(args) -> int:
    model, cfg, _ = _load_run(Path(args.run_dir))
    with warnings.catch_warnings():
        warnings.simplefilter("default")
        stream = compress_model(model, cfg, args.bits)
    Path(args.output).write_bytes(stream.data)
    print(f"{stream.total_bytes} bytes ({stream.payload_bytes} payload, {stream.overhead_bytes} overhead), "
          f"{bpp(stream, (model.num_frames, model.height, model.width)):.5f} bpp")
    return 0


def cmd_decompress(args) -> int:
    model, _, _ = decompress_model(Path(args.stream).read_bytes())
    frames = model.reconstruct().numpy()
    save_frames(frames, args.output)
    print(f"wrote {len(frames)} frames to {args.output}")
    return 0


def cmd_eval(args) -> int:
    recon = load_frames(args.recon)
    ref = load_frames(args.ref)
    if recon.frames.shape != ref.frames.shape:
        raise MSNeRVError(f"shape mismatch: {recon.frames.shape} vs {ref.frames.shape}")
    result = {"psnr": psnr(recon, ref), "ms_ssim": ms_ssim(recon, ref), "frames": recon.num_frames}
    if args.mask:
        result["mask_psnr"] = masked_psnr(recon.frames, ref.frames, MaskSpec(*_parse_hw(args.mask)))
    if args.report:
        _dump_json(result, Path(args.report))
    print(json.dumps(result, sort_keys=True))
    return 0


def cmd_bdrate(args) -> int:
    anchors, tests = read_rd_csv(args.anchor), read_rd_csv(args.test)
    if len(anchors) != 1:
        raise ConfigError(f"{args.anchor}: expected one curve, found {len(anchors)}")
    for curve in tests:
        print(f"{curve.label}: {bd_rate(anchors[0], curve, args.metric):+.4f}%")
    return 0


def cmd_inspect(args) -> int:
    header, tensors = entropy_decode(Path(args.stream).read_bytes())
    from msnerv.codec.bitstream import histogram_entropy

    print(f"config_hash {header.get('config_hash')}  dims {header.get('dims')}  bits {header.get('bits')}")
    print(f"{'tensor':48s} {'shape':>18s} {'bits':>4s} {'H':>7s}")
    for q in tensors:
        print(f"{q.name:48s} {str(list(q.shape)):>18s} {q.bit_depth:4d} {histogram_entropy(q.integers):7.3f}")
    std, ent = param_entropy(tensors)
    print(f"all parameters: std {std:.5f}  entropy {ent:.4f} bits/param")
    return 0


def cmd_interpolate(args) -> int:
    model, _, meta = _load_run(Path(args.run_dir))
    report = json.loads((Path(args.run_dir) / "report.json").read_text())
    if report.get("frames") != list(range(1, 2 * model.num_frames, 2)):
        raise MSNeRVError("interpolation needs a model trained with --frames odd")
    if args.frames != "even":
        raise ConfigError("only --frames even is supported")
    targets = list(range(2, report["source_frames"] + 1, 2))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        frames, flags = interpolate_frames(model, targets)
    for w in caught:
        logger.warning("%s", w.message)
    out = Path(args.output)
    for idx, frame in zip(targets, frames.numpy()):
        save_frames(frame[None], out, start_index=idx)
    _dump_json({"frames": targets, "fallback": flags}, out / "interpolation.json")
    print(f"wrote {len(targets)} interpolated frames to {out}")
    return 0


def cmd_ablate(args) -> int:
    variants = ["FULL"] + [v.strip() for v in args.variants.split(",") if v.strip() and v.strip() != "FULL"]
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}")
    cfg = _resolve_config(args)
    out = Path(args.out)
    rows = []
    with _RunLock(out):
        for v in variants:
            rep = _run_training(cfg, out / v, v)
            rows.append({"Variant": v, "Size (M)": rep["params"] / 1e6, "bpp": rep["bpp"],
                         "PSNR(dB)": rep["psnr"], "MS-SSIM": rep["ms_ssim"]})
        _dump_json({"columns": list(ABLATION_COLUMNS), "rows": rows}, out / "report.json")
        (out / "plots").mkdir(exist_ok=True)
        _plot_rd(rows, out / "plots" / "rd.png")
    print(" | ".join(ABLATION_COLUMNS))
    for r in rows:
        print(f"{r['Variant']} | {r['Size (M)']:.4f} | {r['bpp']:.4f} | {r['PSNR(dB)']:.2f} | {r['MS-SSIM']:.4f}")
    return 0


def cmd_synth(args) -> int:
    video = synthetic_video(args.frames, args.height, args.width, args.seed)
    save_frames(video.frames, args.output)
    print(f"wrote {video.num_frames} frames to {args.output}")
    return 0


# ---------------------------------------------------------------- parser

def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", help="PNG frame directory or .y4m file")
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config key")
    p.add_argument("--epochs", type=int)
    p.add_argument("--qat-epochs", type=int)
    p.add_argument("--bits", type=int)
    p.add_argument("--seed", type=int, help="defaults to $MSNERV_SEED, then the config")
    p.add_argument("--levels", type=int, help="pyramid depth N")
    p.add_argument("--patch-size", help="train on HxW patches")
    p.add_argument("--mask", help="exclude a central HxW region from the loss")
    p.add_argument("--frames", choices=("all", "odd"))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="msnerv", description="Multi-scale neural video representation and compression.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="fit a model to a video")
    _add_run_options(p)
    p.add_argument("--variant", default="FULL", choices=VARIANTS)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compress", help="quantize and entropy-code a trained run")
    p.add_argument("run_dir")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--bits", type=int, default=8)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="decode a bitstream to PNG frames")
    p.add_argument("stream")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("eval", help="PSNR and MS-SSIM of reconstructed frames")
    p.add_argument("--recon", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--report")
    p.add_argument("--mask", help="also report PSNR inside/outside a central HxW mask")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bdrate", help="BD-rate of test curves against an anchor")
    p.add_argument("anchor")
    p.add_argument("test")
    p.add_argument("--metric", default="psnr", choices=("psnr", "ms_ssim"))
    p.set_defaults(func=cmd_bdrate)

    p = sub.add_parser("inspect", help="per-tensor bit depth and entropy of a bitstream")
    p.add_argument("stream")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("interpolate", help="decode unseen even frames from a model trained on odd frames")
    p.add_argument("run_dir")
    p.add_argument("--frames", default="even")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("ablate", help="train FULL and ablation variants and tabulate them")
    _add_run_options(p)
    p.add_argument("--variants", required=True, help="comma-separated, e.g. V1,V7")
    p.add_argument("--out", default="ablation")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("synth", help="write the synthetic test clip")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--height", type=int, default=48)
    p.add_argument("--width", type=int, default=96)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (MSNeRVError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
