"""Forecasting cross-entropy, logit distillation MSE, and their weighted sum.

Both losses carry hand-written gradients (``*_parts`` return value and
d value / d logits); the autograd wrappers reuse them in ``backward``.
Logits are (N, C, H, W); targets are (N, H, W) integer label maps. Values
are per sample, shape (N,).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .core import IGNORE, NumericError, ShapeError


def cross_entropy_parts(
    logits: torch.Tensor, target: torch.Tensor, ignore_label: int = IGNORE
) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean negative log-likelihood over the non-ignored pixels of each sample.

    Returns ``(values, grad)`` with ``grad[n] = d values[n] / d logits[n]``,
    i.e. ``(softmax - onehot) / n_valid`` on valid pixels and 0 elsewhere.
    """
    if logits.dim() != 4 or target.dim() != 3 or logits.shape[:1] + logits.shape[2:] != target.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} do not match")
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite logits")
    n, c = logits.shape[:2]
    target = target.long()
    valid = target != ignore_label
    bad = valid & ((target < 0) | (target >= c))
    if bad.any():
        raise ShapeError(f"target labels outside 0..{c - 1} (and not {ignore_label})")
    counts = valid.flatten(1).sum(dim=1)
    if (counts == 0).any():
        raise NumericError("every pixel of a sample is ignored; the loss is undefined")

    shifted = logits - logits.amax(dim=1, keepdim=True)
    log_z = shifted.exp().sum(dim=1, keepdim=True).log()
    log_p = shifted - log_z
    safe_target = torch.where(valid, target, torch.zeros_like(target))
    picked = log_p.gather(1, safe_target.unsqueeze(1)).squeeze(1)
    picked = torch.where(valid, picked, torch.zeros_like(picked))
    denom = counts.to(logits.dtype)
    values = -picked.flatten(1).sum(dim=1) / denom

    grad = log_p.exp()
    grad.scatter_add_(1, safe_target.unsqueeze(1), -torch.ones_like(grad[:, :1]))
    grad = grad * valid.unsqueeze(1).to(grad.dtype) / denom.view(n, 1, 1, 1)
    return values, grad


def distillation_parts(student: torch.Tensor, teacher: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sample mean squared logit difference and its gradient w.r.t. ``student``."""
    if student.shape != teacher.shape:
        raise ShapeError(f"student logits {tuple(student.shape)} vs teacher {tuple(teacher.shape)}")
    if student.dim() != 4:
        raise ShapeError(f"expected (N, C, H, W) logits, got {tuple(student.shape)}")
    diff = student - teacher.to(student.dtype)
    size = diff[0].numel()
    values = diff.pow(2).flatten(1).sum(dim=1) / size
    return values, diff * (2.0 / size)


class _CrossEntropy(torch.autograd.Function):
    @staticmethod
    def forward(ctx, logits, target, ignore_label):
        values, grad = cross_entropy_parts(logits.detach(), target, ignore_label)
        ctx.save_for_backward(grad)
        return values

    @staticmethod
    def backward(ctx, grad_out):
        (grad,) = ctx.saved_tensors
        return grad_out.view(-1, 1, 1, 1) * grad, None, None


class _Distillation(torch.autograd.Function):
    @staticmethod
    def forward(ctx, student, teacher):
        values, grad = distillation_parts(student.detach(), teacher.detach())
        ctx.save_for_backward(grad)
        return values

    @staticmethod
    def backward(ctx, grad_out):
        (grad,) = ctx.saved_tensors
        # the teacher is a constant
        return grad_out.view(-1, 1, 1, 1) * grad, None


def forecasting_loss(logits: torch.Tensor, target: torch.Tensor, ignore_label: int = IGNORE) -> torch.Tensor:
    return _CrossEntropy.apply(logits, target, ignore_label)


def distillation_loss(student: torch.Tensor, teacher: torch.Tensor) -> torch.Tensor:
    return _Distillation.apply(student, teacher)


@dataclass(frozen=True)
class LossValue:
    total: float
    forecasting: float
    distillation: float
    lam: float

    def as_dict(self) -> dict:
        return {"total": self.total, "forecasting": self.forecasting, "distillation": self.distillation}


def total_loss(l_f: float, l_d: float, lam: float) -> LossValue:
    l_f, l_d, lam = float(l_f), float(l_d), float(lam)
    if not all(math.isfinite(v) for v in (l_f, l_d, lam)):
        raise NumericError(f"non-finite loss component (L_f={l_f}, L_d={l_d}, lambda={lam})")
    if l_f < 0 or l_d < 0 or lam < 0:
        raise NumericError(f"negative loss component (L_f={l_f}, L_d={l_d}, lambda={lam})")
    return LossValue(total=l_f + lam * l_d, forecasting=l_f, distillation=l_d, lam=lam)


def combined_loss(
    logits: torch.Tensor,
    target: torch.Tensor,
    teacher_logits: torch.Tensor | None,
    lam: float,
    ignore_label: int = IGNORE,
) -> tuple[torch.Tensor, LossValue]:
    """Per-sample ``L_f + lam * L_d``, then the batch mean.

    Returns the differentiable scalar and the logged components (batch means).
    With ``teacher_logits=None`` or ``lam == 0`` the distillation term is 0.
    """
    l_f = forecasting_loss(logits, target, ignore_label)
    if teacher_logits is None or lam == 0:
        l_d = torch.zeros_like(l_f)
    else:
        l_d = distillation_loss(logits, teacher_logits)
    per_sample = l_f + lam * l_d
    scalar = per_sample.mean()
    value = total_loss(l_f.detach().mean().item(), l_d.detach().mean().item(), lam)
    return scalar, value
