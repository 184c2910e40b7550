"""Domain types shared across the package: settings, palettes and configs."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Mapping

import numpy as np

IGNORE = 255
IGNORE_RGB = (0, 0, 0)
CLIP_LENGTH = 30
TARGET_INDEX = 19
NUM_LEVELS = 5
SIZE_DIVISOR = 2 ** (NUM_LEVELS - 1)


class SegForecastError(Exception):
    exit_code = 1


class ConfigError(SegForecastError, ValueError):
    exit_code = 2


class DataError(SegForecastError):
    exit_code = 3


class NumericError(SegForecastError, ArithmeticError):
    exit_code = 4


class ShapeError(SegForecastError, ValueError):
    exit_code = 3


# ---------------------------------------------------------------- settings


@dataclass(frozen=True)
class ForecastSetting:
    name: str
    input_indices: tuple[int, ...]
    target_index: int
    d: int
    d_prime: int

    def __post_init__(self):
        idx = tuple(int(i) for i in self.input_indices)
        object.__setattr__(self, "input_indices", idx)
        if len(idx) < 1:
            raise ConfigError(f"setting {self.name!r}: no input indices")
        gaps = {b - a for a, b in zip(idx, idx[1:])}
        if gaps and gaps != {self.d}:
            raise ConfigError(f"setting {self.name!r}: inputs {idx} not spaced by d={self.d}")
        if self.d < 1 or self.d_prime < 1:
            raise ConfigError(f"setting {self.name!r}: d and d_prime must be positive")
        if self.target_index != idx[-1] + self.d_prime:
            raise ConfigError(
                f"setting {self.name!r}: target {self.target_index} != {idx[-1]} + {self.d_prime}"
            )
        if idx[0] < 0:
            raise ConfigError(f"setting {self.name!r}: negative frame index")

    def last(self, n: int) -> "ForecastSetting":
        """Keep only the ``n`` most recent inputs (fewer-input-frame ablation)."""
        if not 1 <= n <= len(self.input_indices):
            raise ConfigError(f"cannot take {n} inputs from setting {self.name!r}")
        return ForecastSetting(self.name, self.input_indices[-n:], self.target_index, self.d, self.d_prime)


_BUILTIN_SETTINGS = {
    "short": ForecastSetting("short", (15, 16, 17, 18), 19, d=1, d_prime=1),
    "mid": ForecastSetting("mid", (7, 10, 13, 16), 19, d=3, d_prime=3),
    "long": ForecastSetting("long", (1, 4, 7, 10), 19, d=3, d_prime=9),
}
SETTING_NAMES = tuple(_BUILTIN_SETTINGS)


def builtin_setting(name: str) -> ForecastSetting:
    try:
        return _BUILTIN_SETTINGS[name]
    except KeyError:
        raise ConfigError(f"unknown forecast setting {name!r}; expected one of {SETTING_NAMES}") from None


# ---------------------------------------------------------------- palette


@dataclass(frozen=True)
class ClassPalette:
    names: tuple[str, ...]
    colors: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        if len(self.names) != len(self.colors) or not self.names:
            raise ConfigError("palette needs one color per class and at least one class")
        colors = tuple(tuple(int(v) for v in c) for c in self.colors)
        object.__setattr__(self, "colors", colors)
        for c in colors:
            if len(c) != 3 or not all(0 <= v <= 255 for v in c):
                raise ConfigError(f"invalid RGB triple {c}")
        if len(set(colors)) != len(colors):
            raise ConfigError("palette colors must be unique")
        if IGNORE_RGB in colors:
            raise ConfigError(f"color {IGNORE_RGB} is reserved for the ignore label")
        if len(colors) >= IGNORE:
            raise ConfigError(f"at most {IGNORE} classes are supported")

    @property
    def num_classes(self) -> int:
        return len(self.names)

    @classmethod
    def from_dict(cls, data: Mapping[str, Mapping]) -> "ClassPalette":
        try:
            ids = sorted(int(k) for k in data)
        except ValueError as exc:
            raise ConfigError(f"palette keys must be integer class ids: {exc}") from None
        if ids != list(range(len(ids))):
            raise ConfigError(f"palette class ids must be 0..C-1, got {ids}")
        entries = [data[str(i)] for i in ids]
        return cls(tuple(e["name"] for e in entries), tuple(tuple(e["rgb"]) for e in entries))

    def to_dict(self) -> dict:
        return {str(i): {"name": n, "rgb": list(c)} for i, (n, c) in enumerate(zip(self.names, self.colors))}

    @classmethod
    def load(cls, path_or_name: str | Path) -> "ClassPalette":
        """Load a palette JSON file, or a bundled one by name ("cityscapes", "synthetic")."""
        p = Path(path_or_name)
        if p.suffix != ".json" and not p.exists():
            try:
                text = resources.files("segforecast.palettes").joinpath(f"{p.name}.json").read_text()
            except FileNotFoundError:
                raise ConfigError(f"no bundled palette named {str(path_or_name)!r}") from None
        else:
            try:
                text = p.read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read palette {p}: {exc}") from None
        return cls.from_dict(json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    def lut(self) -> np.ndarray:
        table = np.zeros((256, 3), dtype=np.uint8)
        table[: self.num_classes] = self.colors
        table[IGNORE] = IGNORE_RGB
        return table


def colorize(seg: np.ndarray, palette: ClassPalette) -> np.ndarray:
    """Map an (H, W) label map to an (H, W, 3) uint8 image."""
    seg = np.asarray(seg)
    valid = (seg >= 0) & ((seg < palette.num_classes) | (seg == IGNORE))
    if not valid.all():
        bad = sorted(set(np.unique(seg[~valid]).tolist()))
        raise DataError(f"labels {bad} are not in the palette ({palette.num_classes} classes)")
    return palette.lut()[seg.astype(np.int64)]


def decolorize(image: np.ndarray, palette: ClassPalette) -> np.ndarray:
    """Inverse of :func:`colorize`; raises on colors not in the palette."""
    image = np.asarray(image, dtype=np.uint8)
    key = (image[..., 0].astype(np.int64) << 16) | (image[..., 1].astype(np.int64) << 8) | image[..., 2]
    codes = {(r << 16) | (g << 8) | b: i for i, (r, g, b) in enumerate(palette.colors)}
    r, g, b = IGNORE_RGB
    codes[(r << 16) | (g << 8) | b] = IGNORE
    uniq, inverse = np.unique(key, return_inverse=True)
    missing = [int(u) for u in uniq if int(u) not in codes]
    if missing:
        rgb = [((m >> 16) & 255, (m >> 8) & 255, m & 255) for m in missing[:5]]
        raise DataError(f"colors {rgb} are not in the palette")
    lookup = np.array([codes[int(u)] for u in uniq], dtype=np.uint8)
    return lookup[inverse].reshape(key.shape)


# ---------------------------------------------------------------- configs


def _as_fraction(value) -> Fraction:
    try:
        f = Fraction(str(value)) if not isinstance(value, Fraction) else value
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"width_multiplier {value!r} is not a rational number") from None
    if f <= 0:
        raise ConfigError("width_multiplier must be positive")
    return f


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    input_mode: str = "rgb"
    num_input_frames: int = 4
    width_multiplier: Fraction = Fraction(1)
    base_channels: tuple[int, ...] = (64, 128, 256, 512, 512)
    conv_repeats: tuple[int, ...] = (2, 2, 4, 4, 4)
    forecast_module: str = "conv3d"
    shared_encoder_weights: bool = True
    out_channels: int | None = None  # head override, e.g. 3 for an RGB forecaster
    rgb_mean: tuple[float, float, float] | None = None  # optional per-channel input normalization
    rgb_std: tuple[float, float, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "width_multiplier", _as_fraction(self.width_multiplier))
        object.__setattr__(self, "base_channels", tuple(int(c) for c in self.base_channels))
        object.__setattr__(self, "conv_repeats", tuple(int(c) for c in self.conv_repeats))
        for name in ("rgb_mean", "rgb_std"):
            value = getattr(self, name)
            if value is not None:
                value = tuple(float(v) for v in value)
                if len(value) != 3 or not all(math.isfinite(v) for v in value):
                    raise ConfigError(f"{name} needs three finite values")
                object.__setattr__(self, name, value)
        if self.rgb_std is not None and min(self.rgb_std) <= 0:
            raise ConfigError("rgb_std values must be positive")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.input_mode not in ("rgb", "segmentation_onehot"):
            raise ConfigError(f"unknown input_mode {self.input_mode!r}")
        if self.num_input_frames not in (2, 3, 4):
            raise ConfigError("num_input_frames must be 2, 3 or 4")
        if len(self.base_channels) != NUM_LEVELS or len(self.conv_repeats) != NUM_LEVELS:
            raise ConfigError(f"base_channels and conv_repeats need {NUM_LEVELS} entries")
        if min(self.base_channels) < 1 or min(self.conv_repeats) < 1:
            raise ConfigError("channel and repeat counts must be positive")
        if self.out_channels is not None and self.out_channels < 1:
            raise ConfigError("out_channels must be positive")

    @property
    def channels(self) -> tuple[int, ...]:
        # round half up, never below one channel
        return tuple(max(1, math.floor(self.width_multiplier * c + Fraction(1, 2))) for c in self.base_channels)

    @property
    def in_channels(self) -> int:
        return 3 if self.input_mode == "rgb" else self.num_classes

    @property
    def head_channels(self) -> int:
        return self.out_channels if self.out_channels is not None else self.num_classes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["width_multiplier"] = str(self.width_multiplier)
        d["base_channels"] = list(self.base_channels)
        d["conv_repeats"] = list(self.conv_repeats)
        for name in ("rgb_mean", "rgb_std"):
            if d[name] is not None:
                d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**dict(d))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 8
    lam: float = 100.0
    optimizer: str = "adam"
    max_steps: int = 2000
    seed: int = 0
    ignore_label: int = IGNORE
    checkpoint_every: int = 0
    grad_clip: float | None = None
    deterministic: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not self.lam >= 0:
            raise ConfigError("lambda must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive when set")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        return cls(**dict(d))


def check_frame_dims(height: int, width: int) -> None:
    if height % SIZE_DIVISOR or width % SIZE_DIVISOR or height < SIZE_DIVISOR or width < SIZE_DIVISOR:
        raise ShapeError(f"frame size {height}x{width} must be a positive multiple of {SIZE_DIVISOR}")
