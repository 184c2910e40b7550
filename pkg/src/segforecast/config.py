"""Run configuration: an INI document with [model], [train], [data], [run] and
[synthetic] sections. Every key is optional; defaults are listed in
``DEFAULTS``. Command-line flags override the file, and ``SEGFORECAST_SEED``
overrides the file's seed.
"""

from __future__ import annotations

import configparser
import os
from io import StringIO
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .core import SETTING_NAMES, ConfigError, ModelConfig, TrainConfig, builtin_setting
from .data import LAYOUTS, SyntheticSceneConfig

SEED_ENV = "SEGFORECAST_SEED"

DEFAULTS: dict[str, dict[str, str]] = {
    "model": {
        "num_classes": "5",
        "input_mode": "rgb",  # rgb | segmentation_onehot
        "num_input_frames": "4",
        "width_multiplier": "1/8",
        "base_channels": "64,128,256,512,512",
        "conv_repeats": "2,2,4,4,4",
        "forecast_module": "conv3d",
        "shared_encoder_weights": "true",
        "rgb_mean": "none",  # e.g. 0.485,0.456,0.406; none = inputs stay in [0, 1]
        "rgb_std": "none",
    },
    "train": {
        "learning_rate": "0.001",
        "batch_size": "8",
        "lambda": "100",
        "optimizer": "adam",
        "max_steps": "2000",
        "seed": "0",
        "ignore_label": "255",
        "checkpoint_every": "0",  # 0 = only at the end
        "grad_clip": "none",
        "deterministic": "true",
    },
    "data": {
        "root": "data",
        "layout": "synthetic_manifest",  # or cityscapes_like
        "height": "0",  # 0 = keep the native size
        "width": "0",
        "palette": "synthetic",  # bundled name or JSON path
    },
    "run": {
        "setting": "mid",  # short | mid | long
        "out_dir": "runs",
        "teacher_checkpoint": "",
    },
    "synthetic": {
        "height": "64",
        "width": "64",
        "num_sprites": "5",
        "sprite_classes": "1,2,3,4",
        "min_speed": "1",
        "max_speed": "3",
        "sprite_size": "12,22",
        "background_class": "0",
        "num_classes": "5",
        "seed": "0",
        "num_clips": "240",
        "val_fraction": "0.1666666666666667",
        "noise": "0.04",
        "palette": "synthetic",
        "visible_from": "7",  # sprites stay fully in view from this frame to the annotated one
        "velocities": "grid",  # grid | compass
        "shared_velocity": "false",
    },
}

INPUT_MODE_ALIASES = {"rgb": "rgb", "segmentation": "segmentation_onehot", "segmentation_onehot": "segmentation_onehot"}


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _floats_or_none(text: str) -> tuple[float, ...] | None:
    if text.strip().lower() in ("", "none"):
        return None
    return tuple(float(v) for v in text.replace(" ", "").split(",") if v)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data_root: Path
    layout: str
    size: tuple[int, int] | None
    palette: str
    setting: str
    out_dir: Path
    teacher_checkpoint: Path | None
    synthetic: SyntheticSceneConfig
    raw: dict[str, dict[str, str]] = field(default_factory=dict, compare=False)

    @property
    def forecast_setting(self):
        return builtin_setting(self.setting)


def read_document(path: str | Path | None) -> dict[str, dict[str, str]]:
    doc = {section: dict(keys) for section, keys in DEFAULTS.items()}
    if path is None:
        return doc
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for section in parser.sections():
        if section not in DEFAULTS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, value in parser.items(section):
            if key not in DEFAULTS[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            doc[section][key] = value
    return doc


def build_run_config(doc: dict[str, dict[str, str]], overrides: dict[str, dict[str, Any]] | None = None) -> RunConfig:
    """Type-check a config document; ``overrides`` (section -> key -> value) win."""
    doc = {s: dict(k) for s, k in doc.items()}
    if os.environ.get(SEED_ENV):
        doc["train"]["seed"] = os.environ[SEED_ENV]
        doc["synthetic"]["seed"] = os.environ[SEED_ENV]
    for section, keys in (overrides or {}).items():
        for key, value in keys.items():
            if value is not None:
                doc[section][key] = str(value)
    try:
        m, t, d, r, s = (doc[k] for k in ("model", "train", "data", "run", "synthetic"))
        mode = INPUT_MODE_ALIASES.get(m["input_mode"])
        if mode is None:
            raise ConfigError(f"unknown input_mode {m['input_mode']!r}")
        model = ModelConfig(
            num_classes=int(m["num_classes"]),
            input_mode=mode,
            num_input_frames=int(m["num_input_frames"]),
            width_multiplier=m["width_multiplier"],
            base_channels=_ints(m["base_channels"]),
            conv_repeats=_ints(m["conv_repeats"]),
            forecast_module=m["forecast_module"],
            shared_encoder_weights=_bool(m["shared_encoder_weights"]),
            rgb_mean=_floats_or_none(m["rgb_mean"]),
            rgb_std=_floats_or_none(m["rgb_std"]),
        )
        grad_clip = None if t["grad_clip"].lower() in ("", "none") else float(t["grad_clip"])
        train = TrainConfig(
            learning_rate=float(t["learning_rate"]),
            batch_size=int(t["batch_size"]),
            lam=float(t["lambda"]),
            optimizer=t["optimizer"],
            max_steps=int(t["max_steps"]),
            seed=int(t["seed"]),
            ignore_label=int(t["ignore_label"]),
            checkpoint_every=int(t["checkpoint_every"]),
            grad_clip=grad_clip,
            deterministic=_bool(t["deterministic"]),
        )
        if d["layout"] not in LAYOUTS:
            raise ConfigError(f"unknown data layout {d['layout']!r}")
        h, w = int(d["height"]), int(d["width"])
        size = (h, w) if h and w else None
        if r["setting"] not in SETTING_NAMES:
            raise ConfigError(f"unknown setting {r['setting']!r}; expected one of {SETTING_NAMES}")
        synthetic = SyntheticSceneConfig(
            height=int(s["height"]),
            width=int(s["width"]),
            num_sprites=int(s["num_sprites"]),
            sprite_classes=_ints(s["sprite_classes"]),
            min_speed=int(s["min_speed"]),
            max_speed=int(s["max_speed"]),
            sprite_size=_ints(s["sprite_size"]),
            background_class=int(s["background_class"]),
            num_classes=int(s["num_classes"]),
            seed=int(s["seed"]),
            num_clips=int(s["num_clips"]),
            val_fraction=float(s["val_fraction"]),
            noise=float(s["noise"]),
            palette=s["palette"],
            visible_from=int(s["visible_from"]),
            velocities=s["velocities"],
            shared_velocity=_bool(s["shared_velocity"]),
        )
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid config value: {exc}") from None
    return RunConfig(
        model=model,
        train=train,
        data_root=Path(d["root"]),
        layout=d["layout"],
        size=size,
        palette=d["palette"],
        setting=r["setting"],
        out_dir=Path(r["out_dir"]),
        teacher_checkpoint=Path(r["teacher_checkpoint"]) if r["teacher_checkpoint"] else None,
        synthetic=synthetic,
        raw=doc,
    )


def load_run_config(path: str | Path | None, overrides: dict[str, dict[str, Any]] | None = None) -> RunConfig:
    return build_run_config(read_document(path), overrides)


def render_document(doc: dict[str, dict[str, str]]) -> str:
    parser = configparser.ConfigParser()
    parser.read_dict(doc)
    buf = StringIO()
    parser.write(buf)
    return buf.getvalue()
