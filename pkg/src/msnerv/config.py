"""Run configuration: dotted keys, file loading, overrides and freezing.

Config files are TOML. Keys mirror module namespaces (``encoder.channels``,
``decoder.factors``, ``loss.hpf.sigma`` ...). Command-line overrides use the
same dotted keys.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from typing import Any

from msnerv.errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

VARIANTS = ("FULL", "V1", "V2", "V3", "V4", "V5", "V6", "V7")


@dataclass
class DataConfig:
    input: str | None = None
    levels: int | None = None
    downsample: str = "max"
    resize: list[int] | None = None
    frames: str = "all"
    patch_mode: bool = False
    patch_size: list[int] | None = None
    mask: list[int] | None = None


@dataclass
class EncoderConfig:
    channels: int = 32
    window: int = 5
    gop_count: int = 5
    base_grids: list[list[float]] = field(default_factory=lambda: [[1.0, 1.0, 0.5], [0.2, 0.5, 0.5]])
    init_range: float = 1e-2
    temporal: bool = True


@dataclass
class DecoderConfig:
    factors: list[int] = field(default_factory=lambda: [3, 2, 2, 2])
    fusion_depth: list[int] = field(default_factory=lambda: [3, 3, 3, 3])
    slice_ratio: float = 0.5
    channels_min: int = 12
    growth: float = 1.0
    mlp_ratio: float = 2.0
    knots: int = 3
    upsample: str = "hybrid"
    fusion: str = "msf"
    cross_depth: bool = True


@dataclass
class HPFConfig:
    kernel: int = 5
    sigma: float = 1.0
    tau: float = 0.0


@dataclass
class LossConfig:
    alpha: list[float] = field(default_factory=lambda: [0.9, 0.8, 0.7, 0.6])
    beta: list[float] = field(default_factory=lambda: [0.1, 0.2, 0.3, 0.3])
    hpf: HPFConfig = field(default_factory=HPFConfig)
    boost: bool = True
    mrs: bool = True


@dataclass
class TrainConfig:
    epochs: int = 300
    lr: float = 2e-3
    min_lr: float = 1e-5
    warmup: float = 0.05
    batch_frames: int = 2
    seed: int = 0
    qat_epochs: int = 30
    qat_lr: float = 2e-4
    bits: int = 8
    grad_clip: float = 1.0
    variant: str = "FULL"
    checkpoint_every: int = 1


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict | None) -> "RunConfig":
        cfg = _build(cls, data or {}, "")
        cfg.validate()
        return cfg

    def flat(self) -> dict[str, Any]:
        return _flatten(self.to_dict())

    def set(self, key: str, value: Any) -> None:
        parts = key.split(".")
        obj = self
        for p in parts[:-1]:
            if not dataclasses.is_dataclass(obj) or not hasattr(obj, p):
                raise ConfigError(f"unknown config key {key!r}")
            obj = getattr(obj, p)
        leaf = parts[-1]
        if not dataclasses.is_dataclass(obj) or leaf not in {f.name for f in dataclasses.fields(obj)}:
            raise ConfigError(f"unknown config key {key!r}")
        if dataclasses.is_dataclass(getattr(obj, leaf)):
            raise ConfigError(f"{key!r} is a section, not a value")
        setattr(obj, leaf, _coerce(getattr(obj, leaf), value, key))

    def replace(self, **overrides) -> "RunConfig":
        cfg = RunConfig.from_dict(self.to_dict())
        for k, v in overrides.items():
            cfg.set(k.replace("__", "."), v)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        e, d, t = self.encoder, self.decoder, self.train
        if e.channels < 2:
            raise ConfigError("encoder.channels must be >= 2")
        if e.window < 1 or e.window % 2 == 0:
            raise ConfigError(f"encoder.window must be odd, got {e.window}")
        if e.gop_count < 1:
            raise ConfigError("encoder.gop_count must be >= 1")
        for g in e.base_grids:
            if len(g) != 3 or not all(v > 0 for v in g):
                raise ConfigError(f"encoder.base_grids entries must be 3 positive numbers, got {g}")
        if abs(sum(g[2] for g in e.base_grids) - 1.0) > 1e-6:
            raise ConfigError("encoder.base_grids channel fractions must sum to 1")
        if len(d.fusion_depth) != len(d.factors):
            raise ConfigError("decoder.fusion_depth and decoder.factors must have equal length")
        if any(s < 1 for s in d.factors) or any(k < 1 for k in d.fusion_depth):
            raise ConfigError("decoder factors and depths must be positive")
        if not 0.0 < d.slice_ratio < 1.0:
            raise ConfigError("decoder.slice_ratio must lie in (0, 1)")
        if d.upsample not in ("hybrid", "bilinear", "shuffle"):
            raise ConfigError(f"decoder.upsample must be hybrid, bilinear or shuffle, got {d.upsample!r}")
        if d.fusion not in ("msf", "conv_mlp"):
            raise ConfigError(f"decoder.fusion must be msf or conv_mlp, got {d.fusion!r}")
        if t.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if t.qat_epochs < 0:
            raise ConfigError("train.qat_epochs must be >= 0")
        if not 4 <= t.bits <= 16:
            raise ConfigError(f"train.bits must lie in [4, 16], got {t.bits}")
        if t.batch_frames < 1:
            raise ConfigError("train.batch_frames must be >= 1")
        if t.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {t.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.data.frames not in ("all", "odd"):
            raise ConfigError("data.frames must be 'all' or 'odd'")
        if self.data.downsample not in ("max", "avg", "bicubic", "direct"):
            raise ConfigError(f"unknown data.downsample {self.data.downsample!r}")
        if self.data.patch_mode and not self.data.patch_size:
            raise ConfigError("data.patch_mode requires data.patch_size")
        self.sa_loss()  # enforces the coefficient contract

    def sa_loss(self):
        from msnerv.objective import SALossConfig

        h = self.loss.hpf
        return SALossConfig(tuple(self.loss.alpha), tuple(self.loss.beta), h.kernel, h.sigma, h.tau)

    def canonical(self) -> str:
        """Key-sorted text form; byte-stable for equal configs."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(current: Any, value: Any, key: str) -> Any:
    if isinstance(value, str):
        parsed = parse_value(value)
        # string keys accept bare words and quoted TOML strings alike
        if not isinstance(current, str) or isinstance(parsed, str):
            value = parsed
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        return float(value)
    if isinstance(current, list) and not isinstance(value, list):
        raise ConfigError(f"{key} expects a list, got {value!r}")
    return value


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {prefix.rstrip('.') or '<root>'} must be a table")
    obj = cls()
    names = {f.name: f for f in dataclasses.fields(cls)}
    for k, v in data.items():
        if k not in names:
            raise ConfigError(f"unknown config key {prefix + k!r}")
        cur = getattr(obj, k)
        if dataclasses.is_dataclass(cur):
            setattr(obj, k, _build(type(cur), v, prefix + k + "."))
        elif v is None:
            setattr(obj, k, None)
        elif cur is None:
            setattr(obj, k, v)
        else:
            setattr(obj, k, _coerce(cur, v, prefix + k))
    return obj


def parse_value(text: str) -> Any:
    """Parse a TOML scalar/array; bare words stay strings."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def load_config(path: str | os.PathLike | None = None, overrides: list[str] | None = None) -> RunConfig:
    data = {}
    if path is not None:
        with open(path, "rb") as fh:
            try:
                data = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
    cfg = RunConfig.from_dict(data)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v.strip())
    cfg.validate()
    return cfg


def load_frozen(path: str | os.PathLike) -> RunConfig:
    with open(path) as fh:
        return RunConfig.from_dict(json.load(fh))
