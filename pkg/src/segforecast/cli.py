"""``segforecast`` command line.

Subcommands: generate, train-teacher, train-student, train-rgb, evaluate,
predict, report. Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import RunConfig, load_run_config, render_document
from .core import (
    SETTING_NAMES,
    ClassPalette,
    ConfigError,
    DataError,
    ModelConfig,
    SegForecastError,
    builtin_setting,
    colorize,
)
from .data import (
    SampleBatch,
    generate_synthetic,
    load_sample,
    load_samples,
    preprocess,
    read_frame,
    scan_dataset,
    to_uint8,
    write_labels,
)
from .evaluation import (
    MetricsReport,
    evaluate_model,
    palette_names,
    read_metrics,
    row_normalized,
    student_predictor,
    two_stage_baseline,
    write_confusion_csv,
    write_metrics,
    zero_motion_baseline,
)
from .model import segment
from .train import (
    Checkpoint,
    load_checkpoint,
    params_checksum,
    train_rgb_forecaster,
    train_student,
    train_teacher,
)

log = logging.getLogger("segforecast")

SUMMARY_SCHEMA_VERSION = 1


# ---------------------------------------------------------------- helpers


def _overrides(args: argparse.Namespace) -> dict:
    get = lambda name: getattr(args, name, None)  # noqa: E731
    return {
        "model": {
            "input_mode": get("input_mode"),
            "num_input_frames": get("num_input_frames"),
            "width_multiplier": get("width_multiplier"),
            "num_classes": get("num_classes"),
        },
        "train": {"lambda": get("lam"), "max_steps": get("max_steps"), "seed": get("seed"),
                  "batch_size": get("batch_size")},
        "data": {"root": get("data"), "layout": get("layout")},
        "run": {"setting": get("setting") if get("setting") != "all" else None,
                "out_dir": get("out"), "teacher_checkpoint": get("teacher")},
    }


def _config(args: argparse.Namespace) -> RunConfig:
    return load_run_config(args.config, _overrides(args))


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1) + "\n")


def _settings(name: str | None, default: str) -> list[str]:
    if name == "all":
        return list(SETTING_NAMES)
    return [name or default]


def _load_split(cfg: RunConfig, split: str, setting_name: str, model_config: ModelConfig,
                require_future: bool = False) -> SampleBatch:
    setting = builtin_setting(setting_name)
    needed = set(setting.input_indices) | {setting.target_index}
    records = scan_dataset(cfg.data_root, cfg.layout, split=split, required_frames=needed)
    if not records:
        raise DataError(f"no {split} clips under {cfg.data_root}")
    return load_samples(records, setting, model_config, cfg.size, require_future=require_future)


def _require_dataset(cfg: RunConfig) -> None:
    if not cfg.data_root.is_dir():
        raise DataError(f"dataset root {cfg.data_root} does not exist")


def _train_summary(kind: str, cfg: RunConfig, state, model, ckpt: Path, log_path: Path) -> dict:
    last = state.history[-1] if state.history else None
    return {
        "schema_version": SUMMARY_SCHEMA_VERSION,
        "kind": kind,
        "setting": cfg.setting,
        "steps": state.step,
        "final_loss": last.as_dict() if last else None,
        "checkpoint": str(ckpt),
        "log": str(log_path),
        "params_sha256": params_checksum(model),
        "config": cfg.raw,
    }


# ---------------------------------------------------------------- commands


def cmd_generate(args: argparse.Namespace) -> int:
    overrides = {"synthetic": {"seed": args.seed, "num_clips": args.num_clips}}
    cfg = load_run_config(args.config, overrides)
    out = Path(args.out)
    if cfg.synthetic.num_clips == 0:
        raise ConfigError("empty dataset requested")
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
    manifest = generate_synthetic(cfg.synthetic, out)
    print(f"generated {manifest['num_clips']} clips (seed {cfg.synthetic.seed}) in {out}")
    return 0


def cmd_train_teacher(args: argparse.Namespace) -> int:
    cfg = _config(args)
    _require_dataset(cfg)
    data = _load_split(cfg, "train", cfg.setting, cfg.model)
    out = cfg.out_dir
    ckpt, log_path = out / "teacher.npz", out / "teacher_log.jsonl"
    model, state = train_teacher(data, cfg.model, cfg.train, ckpt, log_path)
    summary = _train_summary("teacher", cfg, state, model, ckpt, log_path)
    _write_json(out / "teacher_summary.json", summary)
    print(f"teacher: {state.step} steps, final loss {summary['final_loss']['total']:.4f} -> {ckpt}")
    return 0


def cmd_train_student(args: argparse.Namespace) -> int:
    cfg = _config(args)
    _require_dataset(cfg)
    teacher = None
    if cfg.train.lam > 0:
        if cfg.teacher_checkpoint is None or not cfg.teacher_checkpoint.is_file():
            raise ConfigError(
                "student training with distillation (lambda > 0) needs a fixed pretrained teacher; "
                "pass --teacher CHECKPOINT or use --lambda 0"
            )
        teacher_ckpt = load_checkpoint(cfg.teacher_checkpoint)
        if teacher_ckpt.kind != "teacher":
            raise ConfigError(f"{cfg.teacher_checkpoint} is a {teacher_ckpt.kind} checkpoint, not a teacher")
        teacher = teacher_ckpt.build()
    data = _load_split(cfg, "train", cfg.setting, cfg.model, require_future=cfg.train.lam > 0)
    out = cfg.out_dir
    ckpt, log_path = out / "student.npz", out / "student_log.jsonl"
    before = params_checksum(teacher) if teacher is not None else None
    model, state = train_student(data, teacher, cfg.model, cfg.train, ckpt, log_path)
    if teacher is not None and params_checksum(teacher) != before:
        raise SegForecastError("teacher parameters changed during student training")
    summary = _train_summary("student", cfg, state, model, ckpt, log_path)
    summary["lambda"] = cfg.train.lam
    summary["teacher_sha256"] = before
    _write_json(out / "student_summary.json", summary)
    print(f"student: {state.step} steps, lambda {cfg.train.lam:g}, "
          f"final loss {summary['final_loss']['total']:.4f} -> {ckpt}")
    return 0


def cmd_train_rgb(args: argparse.Namespace) -> int:
    cfg = _config(args)
    _require_dataset(cfg)
    data = _load_split(cfg, "train", cfg.setting, cfg.model, require_future=True)
    out = cfg.out_dir
    ckpt, log_path = out / "rgb_forecaster.npz", out / "rgb_forecaster_log.jsonl"
    model, state = train_rgb_forecaster(data, cfg.model, cfg.train, ckpt, log_path)
    _write_json(out / "rgb_forecaster_summary.json", _train_summary("rgb_forecaster", cfg, state, model, ckpt, log_path))
    print(f"rgb forecaster: {state.step} steps -> {ckpt}")
    return 0


def _check_flags_against(ckpt: Checkpoint, args: argparse.Namespace) -> None:
    mc = ckpt.model_config
    from .config import INPUT_MODE_ALIASES

    if args.input_mode and INPUT_MODE_ALIASES.get(args.input_mode) != mc.input_mode:
        raise ConfigError(f"checkpoint was trained with input mode {mc.input_mode!r}, not {args.input_mode!r}")
    if args.num_input_frames and args.num_input_frames != mc.num_input_frames:
        raise ConfigError(f"checkpoint expects {mc.num_input_frames} input frames, not {args.num_input_frames}")
    if args.num_classes and args.num_classes != mc.num_classes:
        raise ConfigError(f"checkpoint has {mc.num_classes} classes, not {args.num_classes}")


def _load_kind(path: str | None, kind: str, flag: str) -> Checkpoint:
    if not path:
        raise ConfigError(f"{flag} is required")
    if not Path(path).is_file():
        raise ConfigError(f"{flag}: no such checkpoint {path}")
    ckpt = load_checkpoint(path)
    if ckpt.kind != kind:
        raise ConfigError(f"{path} is a {ckpt.kind} checkpoint, expected {kind}")
    return ckpt


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _config(args)
    student_ckpt = _load_kind(args.checkpoint, "student", "--checkpoint")
    _check_flags_against(student_ckpt, args)
    teacher_ckpt = rgb_ckpt = None
    if args.baselines:
        if student_ckpt.model_config.input_mode != "rgb":
            raise ConfigError("the zero-motion and two-stage baselines need RGB inputs")
        teacher_ckpt = _load_kind(args.teacher, "teacher", "--teacher (for --baselines)")
        rgb_ckpt = _load_kind(args.rgb_forecaster, "rgb_forecaster", "--rgb-forecaster (for --baselines)")
    _require_dataset(cfg)
    palette = ClassPalette.load(cfg.palette)
    mc = student_ckpt.model_config
    names = palette_names(palette, mc.num_classes)
    student = student_ckpt.build()
    teacher = teacher_ckpt.build() if teacher_ckpt else None
    rgb = rgb_ckpt.build() if rgb_ckpt else None
    out = cfg.out_dir
    rows = []
    for setting in _settings(args.setting, cfg.setting):
        data = _load_split(cfg, args.split, setting, mc)
        info = dict(setting=setting, split=args.split, class_names=names)
        reports = [evaluate_model(student_predictor(student), data, mc.num_classes, model="student", **info)]
        if args.baselines:
            reports.append(evaluate_model(lambda x: zero_motion_baseline(teacher, x), data, mc.num_classes,
                                          model="zero-motion", **info))
            reports.append(evaluate_model(lambda x: two_stage_baseline(rgb, teacher, x), data, mc.num_classes,
                                          model="two-stage", **info))
        for rep in reports:
            stem = f"metrics_{setting}" if rep.model == "student" else f"metrics_{setting}_{rep.model}"
            write_metrics(rep, out / f"{stem}.json")
            write_confusion_csv(rep.confusion, out / f"{stem}_confusion.csv", names)
            rows.append({"model": rep.model, "setting": setting, "miou": rep.miou, "pacc": rep.pacc, "macc": rep.macc})
            print(f"{setting:>5} {rep.model:>11}: mIOU {100 * rep.miou:6.2f}  pAcc {100 * rep.pacc:6.2f}  "
                  f"mAcc {100 * rep.macc:6.2f}")
    if args.baselines:
        _write_json(out / "comparison.json", {"schema_version": SUMMARY_SCHEMA_VERSION, "rows": rows})
        with open(out / "comparison.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["model", "setting", "miou", "pacc", "macc"])
            w.writeheader()
            w.writerows(rows)
    return 0


def _panel(columns: list[np.ndarray], gap: int = 2) -> np.ndarray:
    h = columns[0].shape[0]
    spacer = np.full((h, gap, 3), 255, np.uint8)
    parts = []
    for i, c in enumerate(columns):
        if i:
            parts.append(spacer)
        parts.append(c)
    return np.concatenate(parts, axis=1)


def cmd_predict(args: argparse.Namespace) -> int:
    from PIL import Image

    cfg = _config(args)
    ckpt = _load_kind(args.checkpoint, "student", "--checkpoint")
    mc = ckpt.model_config
    if args.frames and args.clip:
        raise ConfigError("pass either --clip or --frames, not both")
    if not args.frames and not args.clip:
        raise ConfigError("pass --clip ID or --frames PATH...")
    if args.frames and len(args.frames) != mc.num_input_frames:
        raise ConfigError(f"model expects {mc.num_input_frames} frames, got {len(args.frames)}")
    if args.frames and mc.input_mode != "rgb":
        raise ConfigError("--frames takes RGB images; use --clip for segmentation-input models")
    palette = ClassPalette.load(cfg.palette)
    if palette.num_classes < mc.num_classes:
        raise ConfigError(f"palette has {palette.num_classes} classes, model predicts {mc.num_classes}")
    record = None
    if args.clip:
        _require_dataset(cfg)
        matches = [r for r in scan_dataset(cfg.data_root, cfg.layout, required_frames=[]) if r.clip_id == args.clip]
        if not matches:
            raise DataError(f"clip {args.clip!r} not found under {cfg.data_root}")
        record = matches[0]
    model = ckpt.build()
    out = cfg.out_dir
    written = []
    for setting_name in _settings(args.setting, cfg.setting):
        if record is not None:
            sample = load_sample(record, builtin_setting(setting_name), mc, cfg.size, with_future=False)
            inputs, gt, stem = sample.inputs, sample.target, f"{record.clip_id}_{setting_name}"
            if mc.input_mode == "rgb":
                shown = [to_uint8(f.transpose(1, 2, 0)) for f in inputs]
            else:
                shown = [colorize(f.argmax(0).astype(np.uint8), palette) for f in inputs]
        else:
            frames = [preprocess(read_frame(Path(p)), cfg.size, "rgb") for p in args.frames]
            inputs = np.stack([f.transpose(2, 0, 1) for f in frames])
            gt, stem = None, f"frames_{setting_name}"
            shown = [to_uint8(f) for f in frames]
        pred = segment(model, torch.from_numpy(inputs[None]).float())[0].numpy().astype(np.uint8)
        color = colorize(pred, palette)
        write_labels(out / f"{stem}_label.png", pred)
        Image.fromarray(color).save(out / f"{stem}_color.png")
        columns = shown + [color]
        if gt is not None:
            columns.append(colorize(gt, palette))
        else:
            print(f"{stem}: no ground truth available; panel shows inputs and prediction only")
        Image.fromarray(_panel(columns)).save(out / f"{stem}_panel.png")
        written.append(stem)
    _write_json(out / "predictions.json", {
        "schema_version": SUMMARY_SCHEMA_VERSION,
        "checkpoint": str(args.checkpoint),
        "outputs": [{"stem": s, "label": f"{s}_label.png", "color": f"{s}_color.png", "panel": f"{s}_panel.png",
                     "ground_truth": record is not None} for s in written],
    })
    print(f"wrote {len(written)} prediction(s) to {out}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .evaluation import ConfusionMatrix

    docs = [(Path(p), read_metrics(p)) for p in args.metrics]  # validates every file first
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path, doc in docs:
        stem = path.stem
        rows = sorted((c for c in doc["per_class"] if c["iou"] is not None), key=lambda c: (-c["iou"], c["id"]))
        with open(out / f"{stem}_per_class_iou.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rank", "id", "name", "iou"])
            for rank, c in enumerate(rows, 1):
                w.writerow([rank, c["id"], c["name"], c["iou"]])
        cm = ConfusionMatrix(np.asarray(doc["confusion"], dtype=np.int64), doc["ignored_pixels"])
        norm = row_normalized(cm)
        np.savetxt(out / f"{stem}_confusion_rownorm.csv", norm, delimiter=",", fmt="%.6f")
        names = [c["name"] for c in doc["per_class"]]
        fig, ax = plt.subplots(figsize=(1 + 0.4 * len(names), 1 + 0.4 * len(names)))
        ax.imshow(norm, cmap="Greys", vmin=0, vmax=1)
        ax.set_xticks(range(len(names)), names, rotation=90)
        ax.set_yticks(range(len(names)), names)
        ax.set_xlabel("predicted")
        ax.set_ylabel("ground truth")
        ax.set_title(f"{doc['setting']} ({doc.get('model') or 'student'})")
        fig.tight_layout()
        fig.savefig(out / f"{stem}_confusion.png", dpi=100)
        plt.close(fig)
        print(f"{path}: mIOU {100 * doc['miou']:.2f}, {len(rows)} classes present")
    return 0


# ---------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser, data: bool = True) -> None:
    p.add_argument("--config", help="INI config with [model]/[train]/[data]/[run] sections")
    p.add_argument("--out", help="output directory (overrides [run] out_dir)")
    p.add_argument("--setting", help=f"forecast setting: {', '.join(SETTING_NAMES)}")
    if data:
        p.add_argument("--data", help="dataset root (overrides [data] root)")
        p.add_argument("--layout", choices=["cityscapes_like", "synthetic_manifest"])


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input-mode", choices=["rgb", "segmentation", "segmentation_onehot"])
    p.add_argument("--num-input-frames", type=int, choices=[2, 3, 4])
    p.add_argument("--num-classes", type=int)
    p.add_argument("--width-multiplier")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--max-steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segforecast", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic moving-sprites dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--num-clips", type=int)
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train-teacher", help="pretrain the single-frame teacher on the annotated frame")
    _common(p)
    _model_flags(p)
    _train_flags(p)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("train-student", help="train the forecasting student (with distillation)")
    _common(p)
    _model_flags(p)
    _train_flags(p)
    p.add_argument("--teacher", help="teacher checkpoint")
    p.add_argument("--lambda", dest="lam", type=float, help="distillation weight; 0 disables the teacher")
    p.set_defaults(func=cmd_train_student)

    p = sub.add_parser("train-rgb", help="train the RGB forecaster of the two-stage baseline")
    _common(p)
    _model_flags(p)
    _train_flags(p)
    p.set_defaults(func=cmd_train_rgb)

    p = sub.add_parser("evaluate", help="score a student checkpoint (optionally with baselines)")
    _common(p)
    _model_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--baselines", action="store_true", help="add zero-motion and two-stage rows")
    p.add_argument("--teacher", help="single-frame model checkpoint for the baselines")
    p.add_argument("--rgb-forecaster", help="RGB forecaster checkpoint for the two-stage baseline")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="write label, color and panel images for one clip")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip", help="clip id in the dataset")
    p.add_argument("--frames", nargs="+", help="explicit input frame images, oldest first")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", help="per-class IOU table and confusion heatmap from metrics files")
    p.add_argument("metrics", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("show-config", help="print the effective configuration")
    p.add_argument("--config")
    p.set_defaults(func=lambda a: print(render_document(load_run_config(a.config).raw), end="") or 0)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except SegForecastError as exc:
        print(f"segforecast {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
