"""Training: teacher pretraining, student training with distillation, RGB forecaster.

Everything runs in memory on :class:`~segforecast.data.SampleBatch` arrays.
The mini-batch order is a pure function of ``(seed, step)`` so a resumed run
continues exactly where an uninterrupted one would be.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from .core import ConfigError, DataError, ModelConfig, NumericError, TrainConfig
from .data import SampleBatch
from .loss import LossValue, combined_loss, total_loss
from .model import SingleFrameNet, StudentNet, single_frame_config

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA_VERSION = 1
KINDS = ("teacher", "student", "rgb_forecaster")


# ---------------------------------------------------------------- Adam


@dataclass
class TrainState:
    step: int
    params: dict[str, torch.Tensor]
    exp_avg: dict[str, torch.Tensor]
    exp_avg_sq: dict[str, torch.Tensor]
    seed: int = 0
    history: list[LossValue] = field(default_factory=list)

    @classmethod
    def for_model(cls, model: nn.Module, seed: int = 0) -> "TrainState":
        params = {n: p for n, p in model.named_parameters() if p.requires_grad}
        return cls(
            step=0,
            params=params,
            exp_avg={n: torch.zeros_like(p) for n, p in params.items()},
            exp_avg_sq={n: torch.zeros_like(p) for n, p in params.items()},
            seed=seed,
        )


@torch.no_grad()
def adam_step(
    state: TrainState,
    grads: dict[str, torch.Tensor],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> TrainState:
    """One bias-corrected Adam update of every parameter in ``state`` (in place)."""
    for name, g in grads.items():
        if name not in state.params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != state.params[name].shape:
            raise NumericError(f"gradient shape {tuple(g.shape)} does not match parameter {name!r}")
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name!r} at step {state.step + 1}")
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, p in state.params.items():
        g = grads.get(name)
        if g is None:
            continue
        m, v = state.exp_avg[name], state.exp_avg_sq[name]
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        denom = (v / bc2).sqrt_().add_(eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    return state


# ---------------------------------------------------------------- helpers


def set_deterministic(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    if deterministic:
        torch.use_deterministic_algorithms(True)


def batch_indices(step: int, n: int, batch_size: int, seed: int) -> np.ndarray:
    """Sample indices for 0-based ``step``: consecutive slices of per-epoch permutations."""
    pos = np.arange(step * batch_size, (step + 1) * batch_size)
    epochs = pos // n
    out = np.empty(batch_size, dtype=np.int64)
    for e in np.unique(epochs):
        perm = np.random.default_rng([seed, int(e)]).permutation(n)
        sel = epochs == e
        out[sel] = perm[pos[sel] % n]
    return out


def params_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def build_model(kind: str, config: ModelConfig) -> nn.Module:
    if kind == "teacher":
        return SingleFrameNet(single_frame_config(config))
    if kind == "student":
        return StudentNet(config)
    if kind == "rgb_forecaster":
        d = config.to_dict()
        d.update(out_channels=3)
        return StudentNet(ModelConfig.from_dict(d))
    raise ConfigError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    kind: str
    model_config: ModelConfig
    train_config: TrainConfig
    step: int
    state_dict: dict[str, torch.Tensor]
    exp_avg: dict[str, torch.Tensor]
    exp_avg_sq: dict[str, torch.Tensor]
    history: list[LossValue]

    def build(self) -> nn.Module:
        model = build_model(self.kind, self.model_config)
        model = model.to(next(iter(self.state_dict.values())).dtype)
        model.load_state_dict(self.state_dict)
        model.eval()
        return model


def save_checkpoint(path: str | Path, model: nn.Module, kind: str, model_config: ModelConfig,
                    train_config: TrainConfig, state: TrainState | None = None) -> None:
    """Write an ``.npz`` holding metadata, weights, batch-norm buffers and Adam moments."""
    meta = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "kind": kind,
        "model_config": model_config.to_dict(),
        "train_config": train_config.to_dict(),
        "step": state.step if state else 0,
    }
    arrays = {"__meta__": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for name, t in model.state_dict().items():
        arrays[f"model/{name}"] = t.detach().cpu().numpy()
    if state is not None:
        for name in state.params:
            arrays[f"adam_m/{name}"] = state.exp_avg[name].cpu().numpy()
            arrays[f"adam_v/{name}"] = state.exp_avg_sq[name].cpu().numpy()
        hist = np.array([[v.total, v.forecasting, v.distillation, v.lam] for v in state.history], dtype=np.float64)
        arrays["history"] = hist.reshape(-1, 4)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        data = np.load(Path(path), allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    with data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
            raise DataError(f"{path}: unsupported checkpoint schema {meta.get('schema_version')!r}")

        def section(prefix):
            return {k[len(prefix):]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith(prefix)}

        history = []
        if "history" in data.files:
            history = [LossValue(*row) for row in data["history"].tolist()]
        return Checkpoint(
            kind=meta["kind"],
            model_config=ModelConfig.from_dict(meta["model_config"]),
            train_config=TrainConfig.from_dict(meta["train_config"]),
            step=int(meta["step"]),
            state_dict=section("model/"),
            exp_avg=section("adam_m/"),
            exp_avg_sq=section("adam_v/"),
            history=history,
        )


# ---------------------------------------------------------------- loops


class JsonlLog:
    def __init__(self, path: str | Path | None, append: bool = False):
        self.fh = None
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self.fh = open(path, "a" if append else "w")

    def write(self, step: int, value: LossValue, wall_ms: float) -> None:
        if self.fh is not None:
            rec = {"step": step, **value.as_dict(), "wall_ms": round(wall_ms, 3)}
            self.fh.write(json.dumps(rec) + "\n")
            self.fh.flush()

    def close(self) -> None:
        if self.fh is not None:
            self.fh.close()


def _fit(
    model: nn.Module,
    kind: str,
    model_config: ModelConfig,
    tc: TrainConfig,
    n_samples: int,
    loss_fn: Callable[[np.ndarray], tuple[torch.Tensor, LossValue]],
    checkpoint_path: str | Path | None,
    log_path: str | Path | None,
    resume: Checkpoint | None,
    max_steps: int | None,
) -> tuple[nn.Module, TrainState]:
    state = TrainState.for_model(model, tc.seed)
    if resume is not None:
        if resume.kind != kind:
            raise ConfigError(f"cannot resume a {kind} run from a {resume.kind} checkpoint")
        model.load_state_dict(resume.state_dict)
        with torch.no_grad():
            for name in state.params:
                state.exp_avg[name].copy_(resume.exp_avg[name])
                state.exp_avg_sq[name].copy_(resume.exp_avg_sq[name])
        state.step = resume.step
        state.history = list(resume.history)
    stop = tc.max_steps if max_steps is None else max_steps
    logger = JsonlLog(log_path, append=resume is not None)
    model.train()
    try:
        while state.step < stop:
            t0 = time.perf_counter()
            idx = batch_indices(state.step, n_samples, tc.batch_size, tc.seed)
            model.zero_grad(set_to_none=True)
            scalar, value = loss_fn(idx)
            if not math.isfinite(value.total):
                raise NumericError(f"{kind} training: non-finite loss at step {state.step + 1}: {value}")
            scalar.backward()
            if tc.grad_clip is not None:
                nn.utils.clip_grad_norm_(list(state.params.values()), tc.grad_clip)
            grads = {n: p.grad for n, p in state.params.items() if p.grad is not None}
            adam_step(state, grads, tc.learning_rate)
            state.history.append(value)
            logger.write(state.step, value, (time.perf_counter() - t0) * 1e3)
            if checkpoint_path and tc.checkpoint_every and state.step % tc.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, model, kind, model_config, tc, state)
    finally:
        logger.close()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, kind, model_config, tc, state)
    model.eval()
    return model, state


def _tensor(a: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a)).to(dtype)


def train_teacher(
    data: SampleBatch,
    model_config: ModelConfig,
    tc: TrainConfig,
    checkpoint_path: str | Path | None = None,
    log_path: str | Path | None = None,
    resume: Checkpoint | None = None,
    max_steps: int | None = None,
) -> tuple[nn.Module, TrainState]:
    """Fit the single-frame model on (frame at the target index, its annotation)."""
    if data.future is None:
        raise DataError("teacher training needs the frame at the target index for every clip")
    set_deterministic(tc.seed, tc.deterministic)
    model = build_model("teacher", model_config)
    frames, targets = _tensor(data.future), _tensor(data.targets, torch.long)

    def loss_fn(idx):
        logits = model(frames[idx])
        return combined_loss(logits, targets[idx], None, 0.0, tc.ignore_label)

    return _fit(model, "teacher", model_config, tc, len(data), loss_fn, checkpoint_path, log_path, resume, max_steps)


def train_student(
    data: SampleBatch,
    teacher: nn.Module | None,
    model_config: ModelConfig,
    tc: TrainConfig,
    checkpoint_path: str | Path | None = None,
    log_path: str | Path | None = None,
    resume: Checkpoint | None = None,
    max_steps: int | None = None,
) -> tuple[nn.Module, TrainState]:
    """Minimise ``L_f(student) + lam * L_d(student, teacher(future frame))``.

    The teacher runs in evaluation mode without gradients and is never updated.
    """
    if tc.lam > 0:
        if teacher is None:
            raise ConfigError("student training with lambda > 0 needs a pretrained teacher")
        if data.future is None:
            raise DataError("distillation needs the future frame of every clip")
    set_deterministic(tc.seed, tc.deterministic)
    model = build_model("student", model_config)
    inputs, targets = _tensor(data.inputs), _tensor(data.targets, torch.long)
    future = _tensor(data.future) if data.future is not None else None
    if teacher is not None:
        teacher.eval()
        for p in teacher.parameters():
            p.requires_grad_(False)

    def loss_fn(idx):
        logits = model(inputs[idx])
        teacher_logits = None
        if tc.lam > 0:
            with torch.no_grad():
                teacher_logits = teacher(future[idx])
        return combined_loss(logits, targets[idx], teacher_logits, tc.lam, tc.ignore_label)

    return _fit(model, "student", model_config, tc, len(data), loss_fn, checkpoint_path, log_path, resume, max_steps)


def train_rgb_forecaster(
    data: SampleBatch,
    model_config: ModelConfig,
    tc: TrainConfig,
    checkpoint_path: str | Path | None = None,
    log_path: str | Path | None = None,
    resume: Checkpoint | None = None,
    max_steps: int | None = None,
) -> tuple[nn.Module, TrainState]:
    """Student backbone with a 3-channel head, trained by MSE on the future frame."""
    if data.future is None:
        raise DataError("RGB forecaster training needs the future frame of every clip")
    if model_config.input_mode != "rgb":
        raise ConfigError("the RGB forecaster takes RGB inputs")
    set_deterministic(tc.seed, tc.deterministic)
    model = build_model("rgb_forecaster", model_config)
    inputs, future = _tensor(data.inputs), _tensor(data.future)

    def loss_fn(idx):
        pred = model(inputs[idx])
        mse = (pred - future[idx]).pow(2).mean()
        return mse, total_loss(mse.item(), 0.0, 0.0)

    return _fit(model, "rgb_forecaster", model_config, tc, len(data), loss_fn,
                checkpoint_path, log_path, resume, max_steps)
