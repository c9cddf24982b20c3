"""Video loading, resolution pyramids and training batches.

Frames are kept as float arrays shaped ``[T, H, W, 3]`` in ``[0, 1]``.
Frame indices exposed by this module are 1-based.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from msnerv.errors import ConfigError, LoadError

GRID_STRIDE = 24
DOWNSAMPLERS = ("max", "avg", "bicubic", "direct")


@dataclass
class VideoTensor:
    frames: np.ndarray
    frame_rate: float | None = None

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise ConfigError(f"expected frames shaped [T, H, W, 3], got {frames.shape}")
        if frames.shape[0] < 1:
            raise ConfigError("a video needs at least one frame")
        if frames.size and (frames.min() < 0.0 or frames.max() > 1.0):
            raise ConfigError("frame values must lie in [0, 1]")
        self.frames = frames

    @property
    def shape(self) -> tuple[int, int, int]:
        t, h, w, _ = self.frames.shape
        return t, h, w

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def check_stride(self, stride: int = GRID_STRIDE) -> None:
        _, h, w = self.shape
        _check_divisible(h, w, stride)


@dataclass
class ResolutionPyramid:
    """Level ``r`` (1-based, 1 = coarsest) is ``levels[r - 1]``; the last level is the source."""

    levels: list[np.ndarray]

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    def level(self, r: int) -> np.ndarray:
        if not 1 <= r <= self.num_levels:
            raise IndexError(f"pyramid level {r} outside [1, {self.num_levels}]")
        return self.levels[r - 1]

    @property
    def num_frames(self) -> int:
        return self.levels[-1].shape[0]


@dataclass
class TrainBatch:
    frame_indices: list[int]
    targets: list[np.ndarray]
    # (row0, col0, rows, cols) per pyramid level, coarsest first; None for whole frames.
    windows: list[tuple[int, int, int, int]] | None = None
    top_window: tuple[int, int, int, int] | None = field(default=None, repr=False)


def _nearest_multiple(x: int, m: int) -> int:
    return max(m, int(round(x / m)) * m)


def _check_divisible(h: int, w: int, stride: int) -> None:
    if h % stride or w % stride:
        raise ConfigError(
            f"frame size {w}x{h} is not divisible by {stride}; "
            f"nearest valid size is {_nearest_multiple(w, stride)}x{_nearest_multiple(h, stride)} "
            f"(pass resize_to)"
        )


def resize_frames(frames: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    x = torch.from_numpy(frames).permute(0, 3, 1, 2).double()
    x = F.interpolate(x, size=size, mode="bicubic", align_corners=False, antialias=True)
    return x.clamp(0.0, 1.0).permute(0, 2, 3, 1).numpy()


def yuv_to_rgb(y: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """BT.709 limited-range 8-bit YUV planes (full resolution) to RGB in [0, 1]."""
    yf = (y.astype(np.float64) - 16.0) / 219.0
    cb = (u.astype(np.float64) - 128.0) / 224.0
    cr = (v.astype(np.float64) - 128.0) / 224.0
    r = yf + 1.5748 * cr
    g = yf - 0.187324 * cb - 0.468124 * cr
    b = yf + 1.8556 * cb
    return np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0)


def _parse_y4m_header(line: bytes) -> dict:
    tokens = line.decode("ascii").split()
    if not tokens or tokens[0] != "YUV4MPEG2":
        raise LoadError("not a YUV4MPEG2 stream", frame="header")
    info = {"C": "420jpeg"}
    for tok in tokens[1:]:
        info[tok[0]] = tok[1:]
    return info


def _read_y4m(path: Path) -> tuple[np.ndarray, float | None]:
    data = path.read_bytes()
    end = data.find(b"\n")
    if end < 0:
        raise LoadError(f"{path}: missing Y4M header", frame="header")
    info = _parse_y4m_header(data[:end])
    w, h = int(info["W"]), int(info["H"])
    chroma = info["C"]
    if chroma.startswith("420"):
        cw, ch = (w + 1) // 2, (h + 1) // 2
    elif chroma.startswith("444"):
        cw, ch = w, h
    else:
        raise LoadError(f"{path}: unsupported chroma format {chroma}", frame="header")
    fps = None
    if "F" in info:
        num, den = info["F"].split(":")
        fps = float(num) / float(den)
    frame_bytes = w * h + 2 * cw * ch
    pos = end + 1
    frames = []
    idx = 0
    while pos < len(data):
        nl = data.find(b"\n", pos)
        if nl < 0 or not data[pos:nl].startswith(b"FRAME"):
            raise LoadError(f"{path}: bad frame marker for frame {idx}", frame=idx)
        pos = nl + 1
        chunk = data[pos:pos + frame_bytes]
        if len(chunk) != frame_bytes:
            raise LoadError(f"{path}: frame {idx} truncated", frame=idx)
        buf = np.frombuffer(chunk, dtype=np.uint8)
        y = buf[: w * h].reshape(h, w)
        u = buf[w * h: w * h + cw * ch].reshape(ch, cw)
        v = buf[w * h + cw * ch:].reshape(ch, cw)
        if (cw, ch) != (w, h):
            u = u.repeat(2, 0).repeat(2, 1)[:h, :w]
            v = v.repeat(2, 0).repeat(2, 1)[:h, :w]
        frames.append(yuv_to_rgb(y, u, v))
        pos += frame_bytes
        idx += 1
    if not frames:
        raise LoadError(f"{path}: no frames", frame=0)
    return np.stack(frames), fps


_FRAME_RE = re.compile(r"^(\d+)\.png$", re.IGNORECASE)


def list_frame_files(directory: str | os.PathLike) -> list[Path]:
    """Numbered PNG frames in index order."""
    directory = Path(directory)
    found = []
    for p in directory.iterdir():
        m = _FRAME_RE.match(p.name)
        if m:
            found.append((int(m.group(1)), p))
    found.sort()
    return [p for _, p in found]


def read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise LoadError(f"cannot read frame {path.name}: {exc}", frame=path.name) from exc


def load_frames(source: str | os.PathLike, resize_to: tuple[int, int] | None = None) -> VideoTensor:
    """Load a PNG frame directory or a Y4M file.

    Args:
        source: directory of ``%05d.png`` frames or a ``.y4m`` file.
        resize_to: optional ``(H, W)`` applied before the stride check.
    """
    source = Path(source)
    if not source.exists():
        raise LoadError(f"{source} does not exist")
    fps = None
    if source.is_dir():
        files = list_frame_files(source)
        if not files:
            raise LoadError(f"{source}: no numbered PNG frames found")
        frames = [read_png(p) for p in files]
        shapes = {f.shape for f in frames}
        if len(shapes) != 1:
            raise LoadError(f"{source}: frames have mixed sizes {sorted(shapes)}")
        frames = np.stack(frames)
    else:
        frames, fps = _read_y4m(source)
    if resize_to is not None:
        frames = resize_frames(frames, tuple(resize_to))
    _check_divisible(frames.shape[1], frames.shape[2], GRID_STRIDE)
    return VideoTensor(frames, frame_rate=fps)


def to_uint8(frames) -> np.ndarray:
    """The 8-bit values :func:`save_frames` writes."""
    return np.round(np.clip(np.asarray(frames, dtype=np.float64), 0, 1) * 255).astype(np.uint8)


def save_frames(frames: np.ndarray, directory: str | os.PathLike, start_index: int = 1) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for i, frame in enumerate(to_uint8(frames)):
        p = directory / f"{start_index + i:05d}.png"
        Image.fromarray(frame).save(p)
        out.append(p)
    return out


class FrameStore:
    """Lazy PNG directory reader that records which frames were read."""

    def __init__(self, directory: str | os.PathLike):
        self.files = {i + 1: p for i, p in enumerate(list_frame_files(directory))}
        if not self.files:
            raise LoadError(f"{directory}: no numbered PNG frames found")
        self.accesses: list[int] = []

    def __len__(self) -> int:
        return len(self.files)

    def get(self, index: int) -> np.ndarray:
        if index not in self.files:
            raise LoadError(f"frame {index} not available", frame=index)
        self.accesses.append(index)
        return read_png(self.files[index])

    def load(self, indices: Sequence[int]) -> VideoTensor:
        return VideoTensor(np.stack([self.get(i) for i in indices]))


def default_levels(h: int, w: int, max_levels: int = 4, min_side: int = 8) -> int:
    n = 1
    while n < max_levels:
        f = 2 ** n
        if h % f or w % f or min(h, w) // f < min_side:
            break
        n += 1
    return n


def downsample2(x: torch.Tensor, mode: str = "max") -> torch.Tensor:
    """Halve the spatial size of an NCHW tensor."""
    if mode == "max":
        return F.max_pool2d(x, 2, 2)
    if mode == "avg":
        return F.avg_pool2d(x, 2, 2)
    if mode == "bicubic":
        return F.interpolate(x, scale_factor=0.5, mode="bicubic", align_corners=False, antialias=True)
    if mode == "direct":
        return x[..., ::2, ::2]
    raise ConfigError(f"unknown downsampling mode {mode!r}; choose from {DOWNSAMPLERS}")


def build_pyramid(video: VideoTensor | np.ndarray, levels: int | None = None, mode: str = "max") -> ResolutionPyramid:
    frames = video.frames if isinstance(video, VideoTensor) else np.asarray(video)
    _, h, w, _ = frames.shape
    if levels is None:
        levels = default_levels(h, w)
    if levels < 1:
        raise ConfigError("pyramid needs at least one level")
    f = 2 ** (levels - 1)
    if h % f or w % f:
        raise ConfigError(f"{w}x{h} frames cannot be halved {levels - 1} times")
    if mode not in DOWNSAMPLERS:
        raise ConfigError(f"unknown downsampling mode {mode!r}; choose from {DOWNSAMPLERS}")
    out = [frames]
    x = torch.from_numpy(np.ascontiguousarray(frames)).permute(0, 3, 1, 2)
    for _ in range(levels - 1):
        x = downsample2(x, mode)
        out.append(x.permute(0, 2, 3, 1).contiguous().numpy())
    return ResolutionPyramid(out[::-1])


def iter_batches(
    pyramid: ResolutionPyramid,
    batch_frames: int,
    epochs: int = 1,
    patch_mode: bool = False,
    patch_size: tuple[int, int] | None = None,
    seed: int = 0,
    stride: int = GRID_STRIDE,
    frame_subset: Sequence[int] | None = None,
) -> Iterator[TrainBatch]:
    """Yield batches for ``epochs`` epochs; each epoch visits every frame once."""
    top = pyramid.levels[-1]
    t_total, h, w, _ = top.shape
    if batch_frames < 1:
        raise ConfigError("batch_frames must be >= 1")
    if patch_mode:
        if patch_size is None:
            raise ConfigError("patch_mode requires patch_size")
        ph, pw = patch_size
        if ph > h or pw > w:
            raise ConfigError(f"patch {ph}x{pw} larger than frame {h}x{w}")
        if ph % stride or pw % stride:
            raise ConfigError(f"patch size {ph}x{pw} must be divisible by {stride}")
    indices = np.arange(1, t_total + 1) if frame_subset is None else np.asarray(frame_subset)
    rng = np.random.default_rng(seed)
    n = pyramid.num_levels
    for _ in range(epochs):
        order = rng.permutation(indices)
        for start in range(0, len(order), batch_frames):
            idx = [int(i) for i in order[start:start + batch_frames]]
            windows = None
            top_window = None
            if patch_mode:
                r0 = int(rng.integers(0, (h - ph) // stride + 1)) * stride
                c0 = int(rng.integers(0, (w - pw) // stride + 1)) * stride
                top_window = (r0, c0, ph, pw)
                windows = []
                for r in range(1, n + 1):
                    f = 2 ** (n - r)
                    windows.append((r0 // f, c0 // f, ph // f, pw // f))
            targets = []
            for r, lvl in enumerate(pyramid.levels):
                sl = lvl[[i - 1 for i in idx]]
                if windows is not None:
                    a, b, hh, ww = windows[r]
                    sl = sl[:, a:a + hh, b:b + ww]
                targets.append(sl)
            yield TrainBatch(idx, targets, windows, top_window)


def make_batches(pyramid: ResolutionPyramid, batch_frames: int, patch_mode: bool = False,
                 patch_size: tuple[int, int] | None = None, seed: int = 0) -> list[TrainBatch]:
    """One epoch of batches."""
    return list(iter_batches(pyramid, batch_frames, 1, patch_mode, patch_size, seed))


def synthetic_video(num_frames: int = 8, height: int = 48, width: int = 96, seed: int = 0) -> VideoTensor:
    """Moving colour gradient plus a drifting sinusoidal texture."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, height), np.linspace(0, 1, width), indexing="ij")
    phase = rng.uniform(0, 2 * np.pi, size=3)
    frames = []
    for t in range(num_frames):
        shift = t / max(num_frames, 1)
        grad = 0.5 + 0.35 * np.sin(2 * np.pi * (xx * 0.8 + yy * 0.3 - shift)[..., None] + phase)
        tex = 0.1 * np.sin(2 * np.pi * (4 * xx - 2 * shift)) * np.cos(2 * np.pi * 3 * yy)
        frames.append(np.clip(grad + tex[..., None], 0.0, 1.0))
    return VideoTensor(np.stack(frames))
