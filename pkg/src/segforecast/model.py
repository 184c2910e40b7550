"""Networks: VGG-style encoder pathway, Conv3D forecaster, skip-connected decoder.

All tensors are NCHW. A feature pyramid is a list of five maps at
resolutions H, H/2, ..., H/16.
"""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import NUM_LEVELS, SIZE_DIVISOR, ModelConfig, NumericError, ShapeError


def conv_stack(in_ch: int, out_ch: int, repeats: int) -> nn.Sequential:
    """``repeats`` x [3x3 conv -> batch-norm -> ReLU]."""
    layers = []
    for i in range(repeats):
        layers += [
            nn.Conv2d(in_ch if i == 0 else out_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        ]
    return nn.Sequential(*layers)


def check_input(x: torch.Tensor, in_channels: int) -> None:
    if x.dim() != 4:
        raise ShapeError(f"expected an (N, C, H, W) tensor, got shape {tuple(x.shape)}")
    n, c, h, w = x.shape
    if c != in_channels:
        raise ShapeError(f"expected {in_channels} input channels, got {c}")
    if h % SIZE_DIVISOR or w % SIZE_DIVISOR or h == 0 or w == 0:
        raise ShapeError(f"input size {h}x{w} must be a positive multiple of {SIZE_DIVISOR}")


class Encoder(nn.Module):
    """One pathway: five conv blocks separated by 2x2 max-pooling."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.in_channels = config.in_channels
        rgb = config.input_mode == "rgb"
        self.mean = torch.tensor(config.rgb_mean).view(1, 3, 1, 1) if rgb and config.rgb_mean else None
        self.std = torch.tensor(config.rgb_std).view(1, 3, 1, 1) if rgb and config.rgb_std else None
        chans = config.channels
        blocks = []
        prev = self.in_channels
        for ch, reps in zip(chans, config.conv_repeats):
            blocks.append(conv_stack(prev, ch, reps))
            prev = ch
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        check_input(x, self.in_channels)
        if self.mean is not None:
            x = x - self.mean.to(x.dtype)
        if self.std is not None:
            x = x / self.std.to(x.dtype)
        pyramid = []
        for i, block in enumerate(self.blocks):
            if i:
                x = F.max_pool2d(x, kernel_size=2, stride=2)
            x = block(x)
            pyramid.append(x)
        return pyramid


class Conv3dForecaster(nn.Module):
    """Fuses T lowest-level maps into one map of the same shape.

    Two (3,3,3) convs padded in time keep the temporal depth, then a
    (T,3,3) conv without temporal padding collapses it to 1.
    """

    def __init__(self, channels: int, num_frames: int):
        super().__init__()
        self.num_frames = num_frames
        layers = []
        for _ in range(2):
            layers += [nn.Conv3d(channels, channels, 3, padding=1), nn.BatchNorm3d(channels), nn.ReLU(inplace=True)]
        layers += [
            nn.Conv3d(channels, channels, (num_frames, 3, 3), padding=(0, 1, 1)),
            nn.BatchNorm3d(channels),
            nn.ReLU(inplace=True),
        ]
        self.net = nn.Sequential(*layers)

    def forward(self, features: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(features) != self.num_frames:
            raise ShapeError(f"forecaster expects {self.num_frames} feature maps, got {len(features)}")
        shapes = {tuple(f.shape) for f in features}
        if len(shapes) != 1:
            raise ShapeError(f"forecaster inputs disagree in shape: {sorted(shapes)}")
        x = torch.stack(list(features), dim=2)  # N, C, T, h, w
        return self.net(x).squeeze(2)


FORECAST_MODULES = {"conv3d": Conv3dForecaster}


class Decoder(nn.Module):
    """Mirror of the encoder.

    The first stage works at H/16 on [fused ; skip level 5]; each later stage
    upsamples with a 2x2 stride-2 transpose conv, concatenates the skip map of
    that resolution and runs the mirrored conv stack. A 1x1 conv produces the
    output logits.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        ch = config.channels
        reps = config.conv_repeats
        top = NUM_LEVELS - 1
        self.bottom = conv_stack(2 * ch[top], ch[top], reps[top])
        self.up = nn.ModuleList(nn.ConvTranspose2d(ch[l + 1], ch[l], 2, stride=2) for l in range(top))
        self.stages = nn.ModuleList(conv_stack(2 * ch[l], ch[l], reps[l]) for l in range(top))
        self.classifier = nn.Conv2d(ch[0], config.head_channels, 1)

    def forward(self, fused: torch.Tensor, skips: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(skips) != NUM_LEVELS:
            raise ShapeError(f"decoder needs {NUM_LEVELS} skip maps, got {len(skips)}")
        top = NUM_LEVELS - 1
        if fused.shape != skips[top].shape:
            raise ShapeError(f"stage 5: fused map {tuple(fused.shape)} vs skip {tuple(skips[top].shape)}")
        x = self.bottom(torch.cat([fused, skips[top]], dim=1))
        for level in reversed(range(top)):
            x = self.up[level](x)
            if x.shape != skips[level].shape:
                raise ShapeError(
                    f"stage {level + 1}: upsampled {tuple(x.shape)} vs skip {tuple(skips[level].shape)}"
                )
            x = self.stages[level](torch.cat([x, skips[level]], dim=1))
        return self.classifier(x)


def init_weights(module: nn.Module) -> None:
    """He (fan-in) init for convolutions, unit scale / zero shift for batch-norm."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm3d)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class StudentNet(nn.Module):
    """Past frames -> logits of the future segmentation."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        n_enc = 1 if config.shared_encoder_weights else config.num_input_frames
        self.encoders = nn.ModuleList(Encoder(config) for _ in range(n_enc))
        try:
            forecaster_cls = FORECAST_MODULES[config.forecast_module]
        except KeyError:
            raise ShapeError(f"unknown forecast module {config.forecast_module!r}") from None
        self.forecaster = forecaster_cls(config.channels[-1], config.num_input_frames)
        self.decoder = Decoder(config)
        init_weights(self)

    def encode(self, frames: Sequence[torch.Tensor]) -> list[list[torch.Tensor]]:
        if len(frames) != self.config.num_input_frames:
            raise ShapeError(f"expected {self.config.num_input_frames} input frames, got {len(frames)}")
        shapes = {tuple(f.shape) for f in frames}
        if len(shapes) != 1:
            raise ShapeError(f"input frames disagree in shape: {sorted(shapes)}")
        for f in frames:
            check_input(f, self.config.in_channels)
        if len(self.encoders) == 1:
            # one batched pass through the shared pathway
            n = frames[0].shape[0]
            levels = self.encoders[0](torch.cat(list(frames), dim=0))
            return [[lvl[t * n:(t + 1) * n] for lvl in levels] for t in range(len(frames))]
        return [enc(f) for enc, f in zip(self.encoders, frames)]

    def forward(self, frames: Sequence[torch.Tensor] | torch.Tensor) -> torch.Tensor:
        """``frames`` is a list of (N, C, H, W) tensors or one (N, T, C, H, W) tensor."""
        if isinstance(frames, torch.Tensor):
            if frames.dim() != 5:
                raise ShapeError(f"expected an (N, T, C, H, W) tensor, got {tuple(frames.shape)}")
            frames = list(frames.unbind(dim=1))
        pyramids = self.encode(frames)
        fused = self.forecaster([p[-1] for p in pyramids])
        return self.decoder(fused, pyramids[-1])


class SingleFrameNet(nn.Module):
    """Encoder + decoder on one frame; the teacher and zero-motion model.

    The lowest encoder level stands in for the forecaster output, so the
    decoder is the same module as the student's.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.decoder = Decoder(config)
        init_weights(self)

    def forward(self, frame: torch.Tensor) -> torch.Tensor:
        pyramid = self.encoder(frame)
        return self.decoder(pyramid[-1], pyramid)


def single_frame_config(config: ModelConfig) -> ModelConfig:
    """The teacher always sees one RGB frame."""
    d = config.to_dict()
    d.update(input_mode="rgb", out_channels=None)
    return ModelConfig.from_dict(d)


def softmax(logits: torch.Tensor, dim: int = 1) -> torch.Tensor:
    """Channel softmax with max subtraction."""
    if torch.isnan(logits).any():
        raise NumericError("softmax input contains NaN")
    shifted = logits - logits.amax(dim=dim, keepdim=True)
    e = shifted.exp()
    return e / e.sum(dim=dim, keepdim=True)


def predict_labels(prob: torch.Tensor, dim: int = 1) -> torch.Tensor:
    """Per-pixel argmax; ties resolve to the lowest class index."""
    # torch.argmax returns the first maximal index
    return prob.argmax(dim=dim)


@torch.no_grad()
def segment(model: nn.Module, inputs: torch.Tensor) -> torch.Tensor:
    """Evaluation-mode label prediction for a batch."""
    was_training = model.training
    model.eval()
    try:
        return predict_labels(softmax(model(inputs)))
    finally:
        model.train(was_training)
