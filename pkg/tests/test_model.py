import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from segforecast.core import ModelConfig, NumericError, ShapeError
from segforecast.model import (
    Conv3dForecaster,
    Decoder,
    Encoder,
    SingleFrameNet,
    StudentNet,
    predict_labels,
    softmax,
)

DESK = ModelConfig(num_classes=5, width_multiplier="1/8")


def shapes(tensors):
    return [tuple(t.shape) for t in tensors]


def test_encoder_desk_shapes():
    torch.manual_seed(0)
    pyr = Encoder(DESK)(torch.rand(1, 3, 64, 64))
    assert [(h, w, c) for _, c, h, w in shapes(pyr)] == [
        (64, 64, 8), (32, 32, 16), (16, 16, 32), (8, 8, 64), (4, 4, 64)
    ]


def test_encoder_repeat_counts():
    enc = Encoder(ModelConfig(num_classes=19))
    convs = [sum(isinstance(m, torch.nn.Conv2d) for m in b) for b in enc.blocks]
    assert convs == [2, 2, 4, 4, 4]
    bns = [sum(isinstance(m, torch.nn.BatchNorm2d) for m in b) for b in enc.blocks]
    assert bns == [2, 2, 4, 4, 4]


def test_encoder_zero_frame_finite():
    enc = Encoder(DESK).eval()
    with torch.no_grad():
        for level in enc(torch.zeros(1, 3, 32, 32)):
            assert torch.isfinite(level).all()


@pytest.mark.parametrize("size", [(30, 32), (32, 40), (8, 8)])
def test_encoder_rejects_indivisible(size):
    with pytest.raises(ShapeError):
        Encoder(DESK)(torch.zeros(1, 3, *size))


def test_forecaster_shapes():
    f = Conv3dForecaster(64, 4)
    out = f([torch.rand(2, 64, 4, 8) for _ in range(4)])
    assert out.shape == (2, 64, 4, 8)
    f2 = Conv3dForecaster(16, 2)
    assert f2([torch.rand(2, 16, 4, 4) for _ in range(2)]).shape == (2, 16, 4, 4)


def test_forecaster_temporal_mismatch():
    with pytest.raises(ShapeError):
        Conv3dForecaster(16, 4)([torch.rand(2, 16, 4, 4) for _ in range(3)])


def test_forecaster_zero_inputs_finite():
    f = Conv3dForecaster(8, 3).eval()
    with torch.no_grad():
        assert torch.isfinite(f([torch.zeros(1, 8, 2, 2)] * 3)).all()


def test_decoder_stage_mismatch_named():
    dec = Decoder(DESK)
    pyr = Encoder(DESK)(torch.rand(2, 3, 32, 32))
    pyr[1] = torch.rand(2, 16, 8, 8)
    with pytest.raises(ShapeError, match="stage 2"):
        dec(pyr[-1], pyr)


def test_student_desk_logits():
    torch.manual_seed(0)
    net = StudentNet(DESK)
    out = net(torch.rand(2, 4, 3, 64, 64))
    assert out.shape == (2, 5, 64, 64)


@pytest.mark.parametrize("frames", [2, 3, 4])
def test_student_input_counts(frames):
    mc = ModelConfig(num_classes=3, width_multiplier="1/16", num_input_frames=frames)
    out = StudentNet(mc)([torch.rand(2, 3, 32, 32) for _ in range(frames)])
    assert out.shape == (2, 3, 32, 32)


def test_student_wrong_frame_count():
    with pytest.raises(ShapeError):
        StudentNet(DESK)([torch.rand(1, 3, 32, 32)] * 3)


def test_student_segmentation_mode():
    mc = ModelConfig(num_classes=5, width_multiplier="1/16", input_mode="segmentation_onehot")
    out = StudentNet(mc)(torch.rand(2, 4, 5, 32, 32))
    assert out.shape == (2, 5, 32, 32)


def test_student_unshared_encoders():
    mc = ModelConfig(num_classes=5, width_multiplier="1/16", shared_encoder_weights=False)
    net = StudentNet(mc)
    assert len(net.encoders) == 4
    assert net(torch.rand(2, 4, 3, 32, 32)).shape == (2, 5, 32, 32)


def test_shared_encoder_batched_pass_matches_per_frame():
    torch.manual_seed(1)
    net = StudentNet(ModelConfig(num_classes=5, width_multiplier="1/16")).eval()
    frames = [torch.rand(2, 3, 32, 32) for _ in range(4)]
    with torch.no_grad():
        batched = net.encode(frames)
        single = [net.encoders[0](f) for f in frames]
    for a, b in zip(batched, single):
        for x, y in zip(a, b):
            torch.testing.assert_close(x, y)


def test_temporal_order_matters():
    torch.manual_seed(2)
    net = StudentNet(ModelConfig(num_classes=5, width_multiplier="1/16")).eval()
    frames = [torch.rand(1, 3, 32, 32) for _ in range(4)]
    permuted = [frames[1], frames[2], frames[0], frames[3]]
    with torch.no_grad():
        assert not torch.allclose(net(frames), net(permuted))


def test_degenerate_single_class():
    net = StudentNet(ModelConfig(num_classes=1, width_multiplier="1/16")).eval()
    with torch.no_grad():
        logits = net(torch.rand(1, 4, 3, 16, 16))
    assert logits.shape == (1, 1, 16, 16)
    assert (predict_labels(softmax(logits)) == 0).all()


def test_teacher_shapes_and_purity():
    torch.manual_seed(3)
    teacher = SingleFrameNet(DESK).eval()
    x = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        a, b = teacher(x), teacher(x)
    assert a.shape == (1, 5, 64, 64)
    assert torch.equal(a, b)


def test_teacher_student_disjoint_params():
    teacher, student = SingleFrameNet(DESK), StudentNet(DESK)
    t_ids = {id(p) for p in teacher.parameters()}
    assert not t_ids & {id(p) for p in student.parameters()}
    assert not any(p.data_ptr() in {q.data_ptr() for q in teacher.parameters()} for p in student.parameters())


def test_batchnorm_mode_flag():
    net = SingleFrameNet(ModelConfig(num_classes=3, width_multiplier="1/16"))
    x = torch.rand(2, 3, 32, 32)
    before = {k: v.clone() for k, v in net.state_dict().items() if "running" in k}
    net.eval()
    with torch.no_grad():
        a, b = net(x), net(x)
    assert torch.equal(a, b)
    assert all(torch.equal(before[k], net.state_dict()[k]) for k in before)
    net.train()
    with torch.no_grad():
        net(x)
    assert any(not torch.equal(before[k], net.state_dict()[k]) for k in before)


def test_softmax_examples():
    p = softmax(torch.tensor([[0.0, 0.0]]).view(1, 2, 1, 1))
    torch.testing.assert_close(p.flatten(), torch.tensor([0.5, 0.5]))
    p = softmax(torch.tensor([0.0, math.log(3.0)], dtype=torch.float64).view(1, 2, 1, 1))
    torch.testing.assert_close(p.flatten(), torch.tensor([0.25, 0.75], dtype=torch.float64))


def test_softmax_large_logits_stable():
    p = softmax(torch.tensor([1000.0, 0.0]).view(1, 2, 1, 1))
    assert torch.isfinite(p).all()
    torch.testing.assert_close(p.flatten(), torch.tensor([1.0, 0.0]))


def test_softmax_rejects_nan():
    with pytest.raises(NumericError):
        softmax(torch.tensor([float("nan"), 0.0]).view(1, 2, 1, 1))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), shift=st.floats(-50, 50))
def test_softmax_shift_invariance(seed, shift):
    g = torch.Generator().manual_seed(seed)
    o = torch.randn(1, 4, 3, 3, generator=g, dtype=torch.float64) * 5
    k = torch.randn(1, 1, 3, 3, generator=g, dtype=torch.float64) * shift
    torch.testing.assert_close(softmax(o), softmax(o + k))
    torch.testing.assert_close(softmax(o).sum(dim=1), torch.ones(1, 3, 3, dtype=torch.float64))


def test_predict_labels_examples():
    p = torch.tensor([0.1, 0.7, 0.2]).view(1, 3, 1, 1)
    assert predict_labels(p).item() == 1
    uniform = torch.full((1, 3, 4, 4), 1 / 3)
    assert (predict_labels(uniform) == 0).all()
    tie = torch.tensor([0.1, 0.45, 0.45]).view(1, 3, 1, 1)
    assert predict_labels(tie).item() == 1


def test_predict_labels_numpy_agrees():
    o = torch.randn(2, 6, 5, 5)
    np.testing.assert_array_equal(predict_labels(softmax(o)).numpy(), softmax(o).numpy().argmax(axis=1))


def test_rgb_normalization_hook():
    """Normalizing inside the encoder equals feeding pre-normalized frames to an identity encoder."""
    mean, std = (0.5, 0.4, 0.3), (0.2, 0.25, 0.5)
    tiny = ModelConfig(num_classes=3, width_multiplier="1/16")
    plain = Encoder(tiny).eval()
    normed = Encoder(ModelConfig(num_classes=3, width_multiplier="1/16", rgb_mean=mean, rgb_std=std)).eval()
    normed.load_state_dict(plain.state_dict())
    assert set(normed.state_dict()) == set(plain.state_dict())
    x = torch.rand(2, 3, 16, 16)
    pre = (x - torch.tensor(mean).view(1, 3, 1, 1)) / torch.tensor(std).view(1, 3, 1, 1)
    with torch.no_grad():
        for a, b in zip(normed(x), plain(pre)):
            torch.testing.assert_close(a, b)
