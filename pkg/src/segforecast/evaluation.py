"""Confusion-matrix metrics (mIOU, pAcc, mAcc) and the forecasting baselines."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import jsonschema
import numpy as np
import torch
import torch.nn as nn

from .core import IGNORE, ClassPalette, DataError, ShapeError
from .data import SampleBatch
from .model import segment

METRICS_SCHEMA_VERSION = 1

METRICS_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "setting", "split", "miou", "pacc", "macc",
                 "per_class", "confusion", "ignored_pixels", "num_samples"],
    "properties": {
        "schema_version": {"const": METRICS_SCHEMA_VERSION},
        "setting": {"type": "string"},
        "split": {"type": "string"},
        "model": {"type": "string"},
        "miou": {"type": "number", "minimum": 0, "maximum": 1},
        "pacc": {"type": "number", "minimum": 0, "maximum": 1},
        "macc": {"type": "number", "minimum": 0, "maximum": 1},
        "per_class": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "name", "iou"],
                "properties": {
                    "id": {"type": "integer", "minimum": 0},
                    "name": {"type": "string"},
                    "iou": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                },
            },
        },
        "confusion": {"type": "array", "items": {"type": "array", "items": {"type": "integer", "minimum": 0}}},
        "ignored_pixels": {"type": "integer", "minimum": 0},
        "num_samples": {"type": "integer", "minimum": 0},
    },
}


@dataclass
class ConfusionMatrix:
    """Rows are ground-truth classes, columns are predicted classes."""

    counts: np.ndarray
    ignored_pixels: int = 0

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.counts.shape != other.counts.shape:
            raise ShapeError("cannot add confusion matrices of different class counts")
        return ConfusionMatrix(self.counts + other.counts, self.ignored_pixels + other.ignored_pixels)


def _first_bad(mask: np.ndarray) -> tuple[int, ...]:
    return tuple(int(v) for v in np.argwhere(mask)[0])


def accumulate_confusion(pred, gt, cm: ConfusionMatrix, ignore_label: int = IGNORE) -> ConfusionMatrix:
    """Return ``cm`` plus the counts of one (or a batch of) prediction/label maps."""
    pred = np.asarray(pred.cpu() if isinstance(pred, torch.Tensor) else pred).astype(np.int64)
    gt = np.asarray(gt.cpu() if isinstance(gt, torch.Tensor) else gt).astype(np.int64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    c = cm.num_classes
    counted = gt != ignore_label
    bad_gt = counted & ((gt < 0) | (gt >= c))
    if bad_gt.any():
        at = _first_bad(bad_gt)
        raise DataError(f"ground-truth label {gt[at]} out of range at pixel {at}")
    bad_pred = counted & ((pred < 0) | (pred >= c))
    if bad_pred.any():
        at = _first_bad(bad_pred)
        raise DataError(f"predicted label {pred[at]} out of range at pixel {at}")
    idx = gt[counted] * c + pred[counted]
    counts = np.bincount(idx, minlength=c * c).reshape(c, c)
    return ConfusionMatrix(cm.counts + counts, cm.ignored_pixels + int((~counted).sum()))


@dataclass
class MetricsReport:
    miou: float
    pacc: float
    macc: float
    per_class_iou: list[float | None]
    per_class_acc: list[float | None]
    confusion: ConfusionMatrix
    setting: str = ""
    split: str = ""
    num_samples: int = 0
    model: str = ""
    class_names: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        names = self.class_names or [str(i) for i in range(len(self.per_class_iou))]
        doc = {
            "schema_version": METRICS_SCHEMA_VERSION,
            "setting": self.setting,
            "split": self.split,
            "model": self.model,
            "miou": self.miou,
            "pacc": self.pacc,
            "macc": self.macc,
            "per_class": [{"id": i, "name": n, "iou": v} for i, (n, v) in enumerate(zip(names, self.per_class_iou))],
            "confusion": self.confusion.counts.tolist(),
            "ignored_pixels": int(self.confusion.ignored_pixels),
            "num_samples": self.num_samples,
        }
        validate_metrics(doc)
        return doc

    def sorted_per_class(self) -> list[tuple[int, str, float]]:
        """Present classes by descending IOU (ties by class id)."""
        names = self.class_names or [str(i) for i in range(len(self.per_class_iou))]
        rows = [(i, names[i], v) for i, v in enumerate(self.per_class_iou) if v is not None]
        return sorted(rows, key=lambda r: (-r[2], r[0]))


def exact_metrics(cm: ConfusionMatrix) -> dict:
    """Metrics as :class:`~fractions.Fraction`; absent classes map to None."""
    counts = cm.counts
    total = int(counts.sum())
    if total == 0:
        raise DataError("confusion matrix has no counted pixels")
    tp = np.diag(counts)
    rows = counts.sum(axis=1)
    cols = counts.sum(axis=0)
    iou, acc = [], []
    for c in range(cm.num_classes):
        union = int(rows[c] + cols[c] - tp[c])
        iou.append(Fraction(int(tp[c]), union) if union else None)
        acc.append(Fraction(int(tp[c]), int(rows[c])) if rows[c] else None)
    present_iou = [v for v in iou if v is not None]
    present_acc = [v for v in acc if v is not None]
    return {
        "per_class_iou": iou,
        "per_class_acc": acc,
        "miou": sum(present_iou, Fraction(0)) / len(present_iou),
        "pacc": Fraction(int(tp.sum()), total),
        "macc": sum(present_acc, Fraction(0)) / len(present_acc),
    }


def compute_metrics(cm: ConfusionMatrix, **info) -> MetricsReport:
    """IOU_c = TP/(TP+FP+FN) per class; classes with an empty union are absent.

    mAcc averages TP/row-sum over classes that occur in the ground truth.
    """
    ex = exact_metrics(cm)
    as_float = lambda v: None if v is None else float(v)  # noqa: E731
    return MetricsReport(
        miou=float(ex["miou"]),
        pacc=float(ex["pacc"]),
        macc=float(ex["macc"]),
        per_class_iou=[as_float(v) for v in ex["per_class_iou"]],
        per_class_acc=[as_float(v) for v in ex["per_class_acc"]],
        confusion=cm,
        **info,
    )


def validate_metrics(doc: dict, source: str = "metrics") -> None:
    try:
        jsonschema.validate(doc, METRICS_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise DataError(f"{source}: invalid metrics document: {exc.message}") from None


def write_metrics(report: MetricsReport, path: str | Path) -> dict:
    doc = report.to_json()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")
    return doc


def read_metrics(path: str | Path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: {exc}") from None
    validate_metrics(doc, str(path))
    return doc


def write_confusion_csv(cm: ConfusionMatrix, path: str | Path, names: Sequence[str] | None = None) -> None:
    names = list(names) if names else [str(i) for i in range(cm.num_classes)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["gt\\pred"] + names)
        for name, row in zip(names, cm.counts.tolist()):
            w.writerow([name] + row)


# ---------------------------------------------------------------- predictors


Predictor = Callable[[torch.Tensor], torch.Tensor]


def student_predictor(student: nn.Module) -> Predictor:
    return lambda inputs: segment(student, inputs)


def zero_motion_baseline(single_frame_model: nn.Module, inputs: torch.Tensor) -> torch.Tensor:
    """Segment the last observed frame; inputs are (N, T, 3, H, W)."""
    return segment(single_frame_model, inputs[:, -1])


@torch.no_grad()
def two_stage_baseline(rgb_forecaster: Callable, single_frame_model: nn.Module, inputs: torch.Tensor) -> torch.Tensor:
    """Forecast the future RGB frame, then segment it."""
    if isinstance(rgb_forecaster, nn.Module):
        was_training = rgb_forecaster.training
        rgb_forecaster.eval()
        try:
            frame = rgb_forecaster(inputs)
        finally:
            rgb_forecaster.train(was_training)
    else:
        frame = rgb_forecaster(inputs)
    return segment(single_frame_model, frame.clamp(0.0, 1.0))


def last_frame_stub(inputs: torch.Tensor) -> torch.Tensor:
    """An RGB "forecaster" that repeats the last input frame."""
    return inputs[:, -1]


def evaluate_model(
    predict: Predictor,
    data: SampleBatch,
    num_classes: int,
    setting: str = "",
    split: str = "",
    chunk: int = 16,
    **info,
) -> MetricsReport:
    """Accumulate one confusion matrix over ``data`` in order, then score it."""
    if len(data) == 0:
        raise DataError("cannot evaluate on an empty split")
    cm = ConfusionMatrix.zeros(num_classes)
    inputs = torch.from_numpy(np.ascontiguousarray(data.inputs)).float()
    for start in range(0, len(data), chunk):
        pred = predict(inputs[start:start + chunk])
        cm = accumulate_confusion(pred, data.targets[start:start + chunk], cm)
    return compute_metrics(cm, setting=setting, split=split, num_samples=len(data), **info)


def row_normalized(cm: ConfusionMatrix) -> np.ndarray:
    counts = cm.counts.astype(np.float64)
    rows = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)


def palette_names(palette: ClassPalette | None, num_classes: int) -> list[str]:
    if palette is None or palette.num_classes != num_classes:
        return [str(i) for i in range(num_classes)]
    return list(palette.names)
