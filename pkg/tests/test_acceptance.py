"""Acceptance suite: one test (or group) per criterion, numbered 1-11.

A pass/fail line per criterion is printed in the terminal summary. The
desk-scale experiment (criterion 9) trains four models and takes roughly
half an hour on one CPU core.
"""

import json
import time
from fractions import Fraction

import numpy as np
import pytest
import torch

from segforecast.cli import main as cli_main
from segforecast.core import IGNORE, ModelConfig, TrainConfig, builtin_setting
from segforecast.data import SyntheticSceneConfig, generate_synthetic, load_samples, scan_dataset
from segforecast.evaluation import (
    ConfusionMatrix,
    accumulate_confusion,
    compute_metrics,
    evaluate_model,
    exact_metrics,
    student_predictor,
    two_stage_baseline,
    zero_motion_baseline,
)
from segforecast.loss import combined_loss, cross_entropy_parts, distillation_parts
from segforecast.model import SingleFrameNet, StudentNet, predict_labels, segment, softmax
from segforecast.train import params_checksum, train_rgb_forecaster, train_student, train_teacher


def report(num, text):
    print(f"[criterion {num}] {text}")


# ---------------------------------------------------------------- 1


def _total(o, gt, t, lam):
    return (cross_entropy_parts(o, gt)[0] + lam * distillation_parts(o, t)[0]).mean()


def test_criterion_1_loss_gradient_check():
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(1)
    worst = 0.0
    cases = 0
    for lam in (0.0, 1.0, 100.0):
        for _ in range(8):
            c = int(torch.randint(2, 4, (1,), generator=g))
            h, w = (int(v) for v in torch.randint(1, 5, (2,), generator=g))
            o = torch.randn(1, c, h, w, generator=g, dtype=torch.float64)
            t = torch.randn(1, c, h, w, generator=g, dtype=torch.float64)
            gt = torch.randint(0, c, (1, h, w), generator=g)
            analytic = cross_entropy_parts(o, gt)[1] + lam * distillation_parts(o, t)[1]
            fd = torch.zeros_like(o)
            flat, step = o.view(-1), 1e-3
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + step
                up = _total(o, gt, t, lam).item()
                flat[i] = old - step
                down = _total(o, gt, t, lam).item()
                flat[i] = old
                fd.view(-1)[i] = (up - down) / (2 * step)
            rel = ((analytic - fd).norm() / fd.norm().clamp_min(1e-300)).item()
            worst = max(worst, rel)
            cases += 1
            assert rel < 1e-4, (lam, tuple(o.shape), rel)
    elapsed = time.perf_counter() - t0
    report(1, f"{cases} tensors, worst relative error {worst:.2e}, {elapsed:.1f}s")
    assert cases >= 20 and elapsed < 60


# ---------------------------------------------------------------- 2


def test_criterion_2_network_gradient_smoke():
    t0 = time.perf_counter()
    torch.manual_seed(2)
    mc = ModelConfig(num_classes=3, width_multiplier="1/16")
    student = StudentNet(mc).double().train()
    teacher = SingleFrameNet(mc).double().eval()
    x = torch.rand(2, 4, 3, 16, 16, dtype=torch.float64)
    future = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    gt = torch.randint(0, 3, (2, 16, 16))
    gt[0, 0, :4] = IGNORE
    with torch.no_grad():
        t_logits = teacher(future)

    def loss():
        return combined_loss(student(x), gt, t_logits, 100.0)[0]

    student.zero_grad()
    loss().backward()
    params = [p for p in student.parameters()]
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(2)
    picks = rng.choice(sizes.sum(), size=10, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat_idx in picks:
        k = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        p, i = params[k], int(flat_idx - offsets[k])
        analytic = p.grad.view(-1)[i].item()
        with torch.no_grad():
            old = p.view(-1)[i].item()
            step = 1e-6
            p.view(-1)[i] = old + step
            up = loss().item()
            p.view(-1)[i] = old - step
            down = loss().item()
            p.view(-1)[i] = old
        numeric = (up - down) / (2 * step)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, rel)
        assert rel < 1e-3, (k, i, analytic, numeric)
    elapsed = time.perf_counter() - t0
    report(2, f"10 parameters, worst relative error {worst:.2e}, {elapsed:.1f}s")
    assert elapsed < 300


# ---------------------------------------------------------------- 3


def test_criterion_3_full_width_shapes():
    torch.manual_seed(3)
    mc = ModelConfig(num_classes=19, width_multiplier=1)
    student = StudentNet(mc).eval()
    x = torch.rand(1, 4, 3, 256, 512)
    with torch.no_grad():
        pyramid = student.encoders[0](x[:, -1])
        shapes = [tuple(level.shape[1:]) for level in pyramid]
        assert shapes == [(64, 256, 512), (128, 128, 256), (256, 64, 128), (512, 32, 64), (512, 16, 32)]
        repeats = [sum(isinstance(m, torch.nn.Conv2d) for m in block.modules()) for block in student.encoders[0].blocks]
        assert repeats == [2, 2, 4, 4, 4]
        logits = student(x)
    assert tuple(logits.shape) == (1, 19, 256, 512)
    report(3, f"pyramid {shapes}, logits {tuple(logits.shape)}")


# ---------------------------------------------------------------- 4, 5


def _brute_force(pred, gt, c):
    pairs = [(int(a), int(b)) for a, b in zip(gt.ravel(), pred.ravel()) if a != IGNORE]
    ious, accs = [], []
    for k in range(c):
        tp = sum(a == k and b == k for a, b in pairs)
        fp = sum(a != k and b == k for a, b in pairs)
        fn = sum(a == k and b != k for a, b in pairs)
        if tp + fp + fn:
            ious.append(Fraction(tp, tp + fp + fn))
        if tp + fn:
            accs.append(Fraction(tp, tp + fn))
    return sum(ious) / len(ious), Fraction(sum(a == b for a, b in pairs), len(pairs)), sum(accs) / len(accs)


def test_criterion_4_metrics_oracle():
    rng = np.random.default_rng(4)
    for _ in range(100):
        c = int(rng.integers(1, 6))
        pred = rng.integers(0, c, (8, 8))
        gt = rng.integers(0, c, (8, 8))
        gt[rng.random((8, 8)) < 0.15] = IGNORE
        gt[0, 0] = pred[0, 0]  # at least one valid pixel
        cm = accumulate_confusion(pred, gt, ConfusionMatrix.zeros(c))
        ex = exact_metrics(cm)
        oracle = _brute_force(pred, gt, c)
        assert (ex["miou"], ex["pacc"], ex["macc"]) == oracle
        r = compute_metrics(cm)
        assert (r.miou, r.pacc, r.macc) == tuple(float(v) for v in oracle)
    report(4, "100 random pairs match exact enumeration")


def test_criterion_5_worked_metrics_example():
    cm = accumulate_confusion(np.array([[0, 1], [1, 1]]), np.array([[0, 1], [0, 1]]), ConfusionMatrix.zeros(2))
    ex = exact_metrics(cm)
    assert (ex["miou"], ex["pacc"], ex["macc"]) == (Fraction(7, 12), Fraction(3, 4), Fraction(3, 4))
    r = compute_metrics(cm)
    assert (r.miou, r.pacc, r.macc) == (7 / 12, 0.75, 0.75)
    report(5, f"mIOU {ex['miou']}, pAcc {ex['pacc']}, mAcc {ex['macc']}")


# ---------------------------------------------------------------- 6


def test_criterion_6_softmax_argmax_invariants():
    g = torch.Generator().manual_seed(6)
    logits = torch.randn(1000, 7, generator=g, dtype=torch.float64) * 10
    shift = torch.randn(1000, 1, generator=g, dtype=torch.float64) * 100
    p = softmax(logits, dim=1)
    assert ((p.sum(dim=1) - 1).abs() <= 1e-5).all()
    assert ((p >= 0) & (p <= 1)).all()
    assert torch.equal(predict_labels(p, dim=1), predict_labels(softmax(logits + shift, dim=1), dim=1))
    # image layout as well
    img = logits.T.reshape(1, 7, 40, 25)
    assert torch.equal(predict_labels(softmax(img)), predict_labels(softmax(img + shift.T.reshape(1, 1, 40, 25))))
    report(6, "1000 pixels: sums within 1e-5, labels shift-invariant")


# ---------------------------------------------------------------- 7


def test_criterion_7_distillation_identities():
    g = torch.Generator().manual_seed(7)
    for _ in range(50):
        a = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
        b = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
        assert (distillation_parts(a, a)[0] == 0).all()
        assert torch.equal(distillation_parts(a, b)[0], distillation_parts(b, a)[0])
        assert (distillation_parts(a, b)[0] >= 0).all()
    o = torch.tensor([1.0, 2.0, 3.0, 4.0], dtype=torch.float64).view(1, 2, 1, 2)
    assert distillation_parts(o, torch.zeros_like(o))[0].item() == 7.5

    rng = np.random.default_rng(7)
    from segforecast.data import SampleBatch

    inputs = rng.random((4, 4, 3, 16, 16), dtype=np.float32)
    batch = SampleBatch(inputs, rng.integers(0, 3, (4, 16, 16)).astype(np.uint8), list("abcd"), inputs[:, -1].copy())
    mc = ModelConfig(num_classes=3, width_multiplier="1/16")
    teacher, _ = train_teacher(batch, mc, TrainConfig(max_steps=2, batch_size=2))
    before = params_checksum(teacher)
    train_student(batch, teacher, mc, TrainConfig(max_steps=3, batch_size=2, lam=100.0))
    assert params_checksum(teacher) == before
    report(7, "identities hold; teacher checksum unchanged by student training")


# ---------------------------------------------------------------- shared synthetic data


@pytest.fixture(scope="module")
def desk_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk") / "data"
    config = SyntheticSceneConfig(num_clips=240, seed=0)
    generate_synthetic(config, root)
    mc = ModelConfig(num_classes=5, width_multiplier="1/8")
    setting = builtin_setting("mid")
    train = load_samples(scan_dataset(root, "synthetic_manifest", "train"), setting, mc)
    val = load_samples(scan_dataset(root, "synthetic_manifest", "val"), setting, mc)
    return config, mc, train, val


# ---------------------------------------------------------------- 8


def test_criterion_8_zero_motion_identity(desk_data):
    _, mc, train, val = desk_data
    single, _ = train_teacher(train, mc, TrainConfig(max_steps=20, seed=8))
    x = torch.from_numpy(val.inputs)
    for i in range(len(val)):
        assert torch.equal(zero_motion_baseline(single, x[i:i + 1]), segment(single, x[i:i + 1, -1]))
    report(8, f"{len(val)} validation samples bit-equal")


# ---------------------------------------------------------------- 9

DESK_STEPS = 2000


@pytest.fixture(scope="module")
def desk_experiment(desk_data):
    config, mc, train, val = desk_data
    t0 = time.perf_counter()
    assert (config.height, config.width, config.num_classes) == (64, 64, 5)
    assert (len(train), len(val)) == (200, 40)
    assert (config.min_speed, config.max_speed) == (1, 3)

    def miou(predict):
        return 100 * evaluate_model(predict, val, mc.num_classes, setting="mid", split="val").miou

    teacher, _ = train_teacher(train, mc, TrainConfig(max_steps=DESK_STEPS, seed=1))
    results = {"zero-motion": miou(lambda x: zero_motion_baseline(teacher, x))}
    for lam in (100.0, 0.0):
        student, _ = train_student(train, teacher, mc, TrainConfig(max_steps=DESK_STEPS, seed=2, lam=lam))
        results[f"student lambda={lam:g}"] = miou(student_predictor(student))
    rgb, _ = train_rgb_forecaster(train, mc, TrainConfig(max_steps=DESK_STEPS, seed=3))
    results["two-stage"] = miou(lambda x: two_stage_baseline(rgb, teacher, x))
    results["minutes"] = (time.perf_counter() - t0) / 60
    report(9, "mid-term val mIOU " + json.dumps({k: round(v, 2) for k, v in results.items()}))
    return results


def test_criterion_9a_student_beats_zero_motion(desk_experiment):
    r = desk_experiment
    assert r["student lambda=100"] >= r["zero-motion"] + 3.0


def test_criterion_9b_student_beats_two_stage(desk_experiment):
    r = desk_experiment
    assert r["student lambda=100"] > r["two-stage"]


def test_criterion_9c_distillation_does_not_hurt(desk_experiment):
    r = desk_experiment
    assert r["student lambda=100"] >= r["student lambda=0"] - 0.5


def test_criterion_9d_runtime(desk_experiment):
    assert desk_experiment["minutes"] < 45


# ---------------------------------------------------------------- 10

DETERMINISM_CONFIG = """
[model]
width_multiplier = 1/16
[train]
max_steps = 4
batch_size = 2
seed = 10
[data]
root = {root}/data
[run]
out_dir = {root}/runs
[synthetic]
height = 32
width = 32
sprite_size = 6,10
num_clips = 6
val_fraction = 0.5
seed = 10
"""


def _pipeline(root):
    root.mkdir(parents=True)
    cfg = root / "run.cfg"
    cfg.write_text(DETERMINISM_CONFIG.format(root=root))
    c = str(cfg)
    assert cli_main(["generate", "--config", c, "--out", str(root / "data")]) == 0
    assert cli_main(["train-teacher", "--config", c]) == 0
    assert cli_main(["train-student", "--config", c, "--teacher", str(root / "runs/teacher.npz")]) == 0
    assert cli_main(["evaluate", "--config", c, "--checkpoint", str(root / "runs/student.npz")]) == 0
    return (root / "runs/metrics_mid.json").read_bytes()


def test_criterion_10_determinism(tmp_path):
    a = _pipeline(tmp_path / "a")
    b = _pipeline(tmp_path / "b")
    assert a == b
    report(10, f"metrics JSON identical ({len(a)} bytes)")


# ---------------------------------------------------------------- 11


def test_criterion_11_schedule_conformance():
    expected = {"short": ([15, 16, 17, 18], 19), "mid": ([7, 10, 13, 16], 19), "long": ([1, 4, 7, 10], 19)}
    for name, (inputs, target) in expected.items():
        s = builtin_setting(name)
        assert list(s.input_indices) == inputs and s.target_index == target
    report(11, json.dumps(expected))
