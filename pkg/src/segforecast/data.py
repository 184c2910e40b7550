"""Dataset ingestion, preprocessing and the synthetic moving-sprites generator.

Directory layout (shared by real Cityscapes-style data and synthetic data)::

    <root>/frames/<split>/<clip_id>/<clip_id>_<idx:06d>.png
    <root>/labels/<split>/<clip_id>/<clip_id>_000019_label.png

Synthetic datasets additionally carry a label map for every frame and a
``manifest.json`` at the root.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .core import (
    CLIP_LENGTH,
    IGNORE,
    TARGET_INDEX,
    ClassPalette,
    ConfigError,
    DataError,
    ForecastSetting,
    ModelConfig,
    ShapeError,
    check_frame_dims,
)

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_SCHEMA_VERSION = 1
LAYOUTS = ("cityscapes_like", "synthetic_manifest")


def frame_path(root: Path, split: str, clip_id: str, idx: int) -> Path:
    return Path(root) / "frames" / split / clip_id / f"{clip_id}_{idx:06d}.png"


def label_path(root: Path, split: str, clip_id: str, idx: int) -> Path:
    return Path(root) / "labels" / split / clip_id / f"{clip_id}_{idx:06d}_label.png"


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    frame_paths: tuple[Path | None, ...]
    annotation: Path
    split: str
    annotation_index: int = TARGET_INDEX
    # per-frame label maps where available (synthetic data has all of them)
    label_paths: tuple[Path | None, ...] = ()

    def label_for(self, idx: int) -> Path | None:
        if idx == self.annotation_index:
            return self.annotation
        if idx < len(self.label_paths):
            return self.label_paths[idx]
        return None


@dataclass
class Sample:
    """One forecasting example.

    ``inputs`` is (T, C_in, H, W) float32, ``target`` is (H, W) uint8 and
    ``future`` is the (3, H, W) RGB frame at the target index, or None.
    """

    inputs: np.ndarray
    target: np.ndarray
    setting: ForecastSetting
    clip_id: str
    future: np.ndarray | None = None


# ---------------------------------------------------------------- scanning


def scan_dataset(
    root: str | Path,
    layout: str = "cityscapes_like",
    split: str | None = None,
    required_frames: Iterable[int] | None = None,
) -> list[ClipRecord]:
    """Index every clip below ``root``; records are sorted by clip id.

    ``required_frames`` limits which frame indices must exist (all 30 by
    default). Missing frames or annotations raise :class:`DataError`.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    if layout not in LAYOUTS:
        raise ConfigError(f"unknown dataset layout {layout!r}; expected one of {LAYOUTS}")
    required = set(range(CLIP_LENGTH) if required_frames is None else required_frames)

    if layout == "synthetic_manifest":
        manifest = read_manifest(root)
        clips = [(c["clip_id"], c["split"]) for c in manifest["clips"]]
    else:
        clips = []
        frames_dir = root / "frames"
        if not frames_dir.is_dir():
            raise DataError(f"{root} has no frames/ directory (layout {layout})")
        for split_dir in sorted(p for p in frames_dir.iterdir() if p.is_dir()):
            clips += [(c.name, split_dir.name) for c in split_dir.iterdir() if c.is_dir()]

    records = []
    for clip_id, clip_split in sorted(clips):
        if split is not None and clip_split != split:
            continue
        frames = [frame_path(root, clip_split, clip_id, i) for i in range(CLIP_LENGTH)]
        missing = [i for i in sorted(required) if not frames[i].is_file()]
        if missing:
            raise DataError(f"clip {clip_id}: missing frame(s) {missing}")
        annotation = label_path(root, clip_split, clip_id, TARGET_INDEX)
        if not annotation.is_file():
            raise DataError(f"clip {clip_id}: missing annotation for frame {TARGET_INDEX} ({annotation})")
        labels = [label_path(root, clip_split, clip_id, i) for i in range(CLIP_LENGTH)]
        records.append(
            ClipRecord(
                clip_id=clip_id,
                frame_paths=tuple(p if p.is_file() else None for p in frames),
                annotation=annotation,
                split=clip_split,
                label_paths=tuple(p if p.is_file() else None for p in labels),
            )
        )
    return records


def read_manifest(root: str | Path) -> dict:
    path = Path(root) / MANIFEST_NAME
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"no {MANIFEST_NAME} in {root}") from None
    if manifest.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise DataError(f"{path}: unsupported manifest schema {manifest.get('schema_version')!r}")
    return manifest


# ---------------------------------------------------------------- image io


def read_frame(path: Path) -> np.ndarray:
    """Read an RGB image as (H, W, 3) float32 in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def read_labels(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise DataError(f"{path}: label maps must be 8-bit single channel, got mode {im.mode}")
        return np.asarray(im, dtype=np.uint8).copy()


def write_frame(path: Path, frame: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(frame)).save(path, optimize=False)


def write_labels(path: Path, seg: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(seg, dtype=np.uint8), mode="L").save(path, optimize=False)


def to_uint8(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.dtype == np.uint8:
        return frame
    return np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)


# ---------------------------------------------------------------- preprocessing


def preprocess(image: np.ndarray, target_size: tuple[int, int] | None, kind: str | None = None) -> np.ndarray:
    """Downsample an RGB frame (area averaging) or label map (nearest neighbour).

    ``kind`` is "rgb" or "labels"; by default 3-D arrays are RGB and 2-D
    arrays are label maps. RGB output is float32 in [0, 1].
    """
    image = np.asarray(image)
    kind = kind or ("rgb" if image.ndim == 3 else "labels")
    if kind == "rgb":
        if image.ndim != 3 or image.shape[2] != 3:
            raise ShapeError(f"expected an (H, W, 3) frame, got {image.shape}")
        if image.dtype == np.uint8:
            image = image.astype(np.float32) / 255.0
        image = image.astype(np.float32, copy=False)
        if not np.isfinite(image).all() or image.min() < 0 or image.max() > 1:
            raise DataError("frame values must be finite and within [0, 1]")
    elif kind == "labels":
        if image.ndim != 2:
            raise ShapeError(f"expected an (H, W) label map, got {image.shape}")
    else:
        raise ConfigError(f"unknown preprocess kind {kind!r}")

    h, w = image.shape[:2]
    if target_size is None:
        return image
    th, tw = (int(v) for v in target_size)
    check_frame_dims(th, tw)
    if th > h or tw > w:
        raise ConfigError(f"only downsampling is supported ({h}x{w} -> {th}x{tw})")
    if (th, tw) == (h, w):
        return image

    if kind == "labels":
        rows = (np.arange(th) * h) // th
        cols = (np.arange(tw) * w) // tw
        return image[np.ix_(rows, cols)]

    if h % th == 0 and w % tw == 0:
        fy, fx = h // th, w // tw
        return image.reshape(th, fy, tw, fx, 3).mean(axis=(1, 3), dtype=np.float64).astype(np.float32)
    chans = [
        np.asarray(Image.fromarray(image[..., c], mode="F").resize((tw, th), Image.Resampling.BOX))
        for c in range(3)
    ]
    return np.clip(np.stack(chans, axis=-1), 0.0, 1.0).astype(np.float32)


def one_hot(seg: np.ndarray, num_classes: int) -> np.ndarray:
    """(H, W) labels -> (C, H, W) float32; ignored pixels are all-zero."""
    seg = np.asarray(seg)
    out = np.zeros((num_classes,) + seg.shape, dtype=np.float32)
    valid = seg < num_classes
    hh, ww = np.nonzero(valid)
    out[seg[valid].astype(np.int64), hh, ww] = 1.0
    return out


def load_sample(
    record: ClipRecord,
    setting: ForecastSetting,
    config: ModelConfig,
    size: tuple[int, int] | None = None,
    with_future: bool = True,
) -> Sample:
    """Select and preprocess the frames of ``record`` scheduled by ``setting``.

    With fewer model inputs than the schedule provides, the most recent
    frames are kept.
    """
    if record.annotation_index != setting.target_index:
        raise DataError(
            f"clip {record.clip_id}: annotation is for frame {record.annotation_index}, "
            f"setting {setting.name!r} targets frame {setting.target_index}"
        )
    if max(setting.input_indices) >= CLIP_LENGTH:
        raise DataError(f"setting {setting.name!r} indexes past the clip length")
    setting = setting.last(config.num_input_frames) if config.num_input_frames < len(setting.input_indices) else setting
    if len(setting.input_indices) != config.num_input_frames:
        raise ConfigError(
            f"setting {setting.name!r} provides {len(setting.input_indices)} inputs, "
            f"model expects {config.num_input_frames}"
        )

    target = read_labels(record.annotation)
    if size is None:
        size = target.shape
    target = preprocess(target, size, "labels")

    inputs = []
    for idx in setting.input_indices:
        if config.input_mode == "rgb":
            path = record.frame_paths[idx]
            if path is None:
                raise DataError(f"clip {record.clip_id}: missing frame {idx}")
            frame = preprocess(read_frame(path), size, "rgb")
            inputs.append(frame.transpose(2, 0, 1))
        else:
            path = record.label_for(idx)
            if path is None:
                raise DataError(f"clip {record.clip_id}: segmentation input needs a label map for frame {idx}")
            inputs.append(one_hot(preprocess(read_labels(path), size, "labels"), config.num_classes))
    inputs = np.stack(inputs)
    if inputs.shape[-2:] != target.shape:
        raise ShapeError(f"clip {record.clip_id}: inputs {inputs.shape[-2:]} vs target {target.shape}")

    future = None
    if with_future:
        path = record.frame_paths[setting.target_index]
        if path is not None:
            future = preprocess(read_frame(path), size, "rgb").transpose(2, 0, 1)
    return Sample(inputs=inputs, target=target, setting=setting, clip_id=record.clip_id, future=future)


@dataclass
class SampleBatch:
    """All samples of a split stacked into arrays, for in-memory training."""

    inputs: np.ndarray
    targets: np.ndarray
    clip_ids: list[str]
    future: np.ndarray | None

    def __len__(self) -> int:
        return len(self.clip_ids)


def load_samples(
    records: Sequence[ClipRecord],
    setting: ForecastSetting,
    config: ModelConfig,
    size: tuple[int, int] | None = None,
    require_future: bool = False,
) -> SampleBatch:
    if not records:
        raise DataError("no clips to load")
    samples = []
    for rec in records:
        s = load_sample(rec, setting, config, size, with_future=True)
        if require_future and s.future is None:
            log.warning("clip %s has no frame %d; skipped", rec.clip_id, setting.target_index)
            continue
        samples.append(s)
    if not samples:
        raise DataError("every clip was skipped")
    future = None
    if all(s.future is not None for s in samples):
        future = np.stack([s.future for s in samples])
    return SampleBatch(
        inputs=np.stack([s.inputs for s in samples]),
        targets=np.stack([s.target for s in samples]),
        clip_ids=[s.clip_id for s in samples],
        future=future,
    )


# ---------------------------------------------------------------- synthetic data


SHAPES = ("square", "disk", "diamond", "bar")
VELOCITY_SETS = ("grid", "compass")
COMPASS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


@dataclass(frozen=True)
class SyntheticSceneConfig:
    height: int = 64
    width: int = 64
    num_sprites: int = 5
    sprite_classes: tuple[int, ...] = (1, 2, 3, 4)
    min_speed: int = 1
    max_speed: int = 3
    sprite_size: tuple[int, int] = (12, 22)
    background_class: int = 0
    num_classes: int = 5
    seed: int = 0
    num_clips: int = 240
    frames_per_clip: int = CLIP_LENGTH
    val_fraction: float = 1 / 6
    noise: float = 0.04
    palette: str = "synthetic"
    visible_from: int = 7
    velocities: str = "grid"  # grid: any integer (vy, vx); compass: speed x one of 8 directions
    shared_velocity: bool = False  # one velocity for every sprite of a clip, like a panning camera

    def __post_init__(self):
        object.__setattr__(self, "sprite_classes", tuple(int(c) for c in self.sprite_classes))
        object.__setattr__(self, "sprite_size", tuple(int(c) for c in self.sprite_size))
        check_frame_dims(self.height, self.width)
        if self.num_clips < 0 or self.num_sprites < 0:
            raise ConfigError("num_clips and num_sprites must be >= 0")
        if self.frames_per_clip != CLIP_LENGTH:
            raise ConfigError(f"clips must have exactly {CLIP_LENGTH} frames")
        if not 0 <= self.min_speed <= self.max_speed:
            raise ConfigError("need 0 <= min_speed <= max_speed")
        lo, hi = self.sprite_size
        if not 1 <= lo <= hi:
            raise ConfigError("sprite_size must be 1 <= min <= max")
        if self.num_sprites and lo > min(self.height, self.width):
            raise ConfigError(f"canvas {self.height}x{self.width} is too small for sprites of size {lo}")
        classes = set(self.sprite_classes) | {self.background_class}
        if not classes <= set(range(self.num_classes)):
            raise ConfigError(f"sprite/background classes must be < num_classes={self.num_classes}")
        if self.num_sprites and not self.sprite_classes:
            raise ConfigError("sprite_classes is empty")
        if self.background_class in self.sprite_classes:
            raise ConfigError("background class cannot also be a sprite class")
        if not 0 <= self.val_fraction <= 1:
            raise ConfigError("val_fraction must be within [0, 1]")
        if self.velocities not in VELOCITY_SETS:
            raise ConfigError(f"velocities must be one of {VELOCITY_SETS}")
        if not 0 <= self.visible_from <= TARGET_INDEX:
            raise ConfigError(f"visible_from must be within [0, {TARGET_INDEX}]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sprite_classes"] = list(self.sprite_classes)
        d["sprite_size"] = list(self.sprite_size)
        return d


@dataclass(frozen=True)
class Sprite:
    """A sprite centred at ``(cy, cx) + t * (vy, vx)`` in frame ``t``."""

    class_id: int
    shape: str
    size: int
    cy: int
    cx: int
    vy: int
    vx: int
    color: tuple[float, float, float]

    def center(self, t: int) -> tuple[int, int]:
        return self.cy + self.vy * t, self.cx + self.vx * t


def sprite_mask(shape: str, size: int, cy: int, cx: int, height: int, width: int) -> np.ndarray:
    """Boolean (H, W) footprint of a sprite centred at integer (cy, cx)."""
    dy = np.arange(height)[:, None] - cy
    dx = np.arange(width)[None, :] - cx
    r = size / 2.0
    if shape == "square":
        return (np.abs(dy) < r) & (np.abs(dx) < r)
    if shape == "disk":
        return dy**2 + dx**2 < r * r
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) < r
    if shape == "bar":
        return (np.abs(dy) < max(r / 3.0, 1.0)) & (np.abs(dx) < r)
    raise ConfigError(f"unknown sprite shape {shape!r}")


def clip_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _visible_coordinate(rng: np.random.Generator, half: int, extent: int, travel: int) -> int:
    lo, hi = half, max(half, extent - half - 1)
    lo2, hi2 = max(lo, lo + travel), min(hi, hi + travel)
    if lo2 <= hi2:
        lo, hi = lo2, hi2
    return int(rng.integers(lo, hi + 1))


def _sample_velocity(config: SyntheticSceneConfig, rng: np.random.Generator) -> tuple[int, int]:
    if config.velocities == "compass":
        speed = int(rng.integers(config.min_speed, config.max_speed + 1))
        dy, dx = COMPASS[int(rng.integers(len(COMPASS)))]
        return speed * dy, speed * dx
    while True:
        vy, vx = (int(v) for v in rng.integers(-config.max_speed, config.max_speed + 1, size=2))
        if max(abs(vy), abs(vx)) >= config.min_speed:
            return vy, vx


def make_sprites(config: SyntheticSceneConfig, rng: np.random.Generator, palette: ClassPalette) -> list[Sprite]:
    sprites = []
    t_ref = TARGET_INDEX
    shared = _sample_velocity(config, rng) if config.shared_velocity else None
    for _ in range(config.num_sprites):
        cls = int(rng.choice(config.sprite_classes))
        size = int(rng.integers(config.sprite_size[0], config.sprite_size[1] + 1))
        vy, vx = shared or _sample_velocity(config, rng)
        # fully on the canvas at the annotated frame and, where the canvas
        # allows it, at every frame from ``visible_from`` on
        half = size // 2
        span = t_ref - config.visible_from
        y_ref = _visible_coordinate(rng, half, config.height, vy * span)
        x_ref = _visible_coordinate(rng, half, config.width, vx * span)
        base = np.asarray(palette.colors[cls], dtype=np.float64) / 255.0
        color = tuple(float(c) for c in np.clip(base + rng.uniform(-0.08, 0.08, size=3), 0.0, 1.0))
        shape = SHAPES[(cls - 1) % len(SHAPES)]
        sprites.append(Sprite(cls, shape, size, y_ref - vy * t_ref, x_ref - vx * t_ref, vy, vx, color))
    return sprites


def render_labels(sprites: Sequence[Sprite], t: int, config: SyntheticSceneConfig) -> np.ndarray:
    seg = np.full((config.height, config.width), config.background_class, dtype=np.uint8)
    for s in sprites:  # later sprites occlude earlier ones
        cy, cx = s.center(t)
        seg[sprite_mask(s.shape, s.size, cy, cx, config.height, config.width)] = s.class_id
    return seg


def render_frame(
    sprites: Sequence[Sprite],
    t: int,
    config: SyntheticSceneConfig,
    background: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    frame = background.copy()
    for s in sprites:
        cy, cx = s.center(t)
        frame[sprite_mask(s.shape, s.size, cy, cx, config.height, config.width)] = s.color
    frame += rng.normal(0.0, config.noise, size=frame.shape)
    return np.clip(frame, 0.0, 1.0)


def make_background(config: SyntheticSceneConfig, rng: np.random.Generator, palette: ClassPalette) -> np.ndarray:
    base = np.asarray(palette.colors[config.background_class], dtype=np.float64) / 255.0
    gy, gx = rng.uniform(-0.15, 0.15, size=2)
    yy = np.linspace(-0.5, 0.5, config.height)[:, None, None]
    xx = np.linspace(-0.5, 0.5, config.width)[None, :, None]
    return np.clip(base + gy * yy + gx * xx + np.zeros((1, 1, 3)), 0.0, 1.0)


def assign_splits(clip_ids: Sequence[str], val_fraction: float) -> dict[str, str]:
    """Deterministic split: the clips with the smallest id hashes go to val."""
    n_val = int(round(val_fraction * len(clip_ids)))
    ranked = sorted(clip_ids, key=lambda c: hashlib.sha256(c.encode()).hexdigest())
    val = set(ranked[:n_val])
    return {c: ("val" if c in val else "train") for c in clip_ids}


def generate_clip(config: SyntheticSceneConfig, seed: int, palette: ClassPalette):
    """Return (sprites, frames, label maps) of one clip."""
    rng = np.random.default_rng(seed)
    sprites = make_sprites(config, rng, palette)
    background = make_background(config, rng, palette)
    frames, labels = [], []
    for t in range(config.frames_per_clip):
        frames.append(render_frame(sprites, t, config, background, rng))
        labels.append(render_labels(sprites, t, config))
    return sprites, frames, labels


def generate_synthetic(config: SyntheticSceneConfig, out_dir: str | Path) -> dict:
    """Write a synthetic dataset to ``out_dir`` and return its manifest."""
    palette = ClassPalette.load(config.palette)
    if palette.num_classes != config.num_classes:
        raise ConfigError(f"palette {config.palette!r} has {palette.num_classes} classes, config says {config.num_classes}")
    if config.num_clips == 0:
        raise ConfigError("empty dataset requested")
    out = Path(out_dir)
    clip_ids = [f"synth_{i:05d}" for i in range(config.num_clips)]
    splits = assign_splits(clip_ids, config.val_fraction)
    clips = []
    for i, clip_id in enumerate(clip_ids):
        seed = clip_seed(config.seed, i)
        sprites, frames, labels = generate_clip(config, seed, palette)
        split = splits[clip_id]
        for t, (frame, seg) in enumerate(zip(frames, labels)):
            write_frame(frame_path(out, split, clip_id, t), frame)
            write_labels(label_path(out, split, clip_id, t), seg)
        clips.append(
            {
                "clip_id": clip_id,
                "split": split,
                "seed": seed,
                "sprites": [
                    {"class_id": s.class_id, "shape": s.shape, "size": s.size,
                     "y0": s.cy, "x0": s.cx, "vy": s.vy, "vx": s.vx}
                    for s in sprites
                ],
            }
        )
    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "config": config.to_dict(),
        "palette": palette.to_dict(),
        "num_clips": len(clips),
        "clips": clips,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1) + "\n")
    palette.save(out / "palette.json")
    return manifest
