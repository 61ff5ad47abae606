import numpy as np
import pytest

from fsnet import gradsuite
from fsnet.geometry import RoiBatch
from fsnet.gradcheck import (EPS, STEP, TOL_PIECEWISE, GradReport, central_difference, check_gradients,
                             kinks_clear, relative_error)
from fsnet.model import DetectorConfig, FSNet, head_backward, head_forward, toy_backbone, toy_backbone_backward
from fsnet.train import batch_loss


# --- the oracle itself ---------------------------------------------------------

def test_quadratic():
    x = np.array([1.0, 2.0])
    g, bad = central_difference(lambda: float((x ** 2).sum()), x)
    np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-8)
    assert not bad.any()
    assert x.tolist() == [1.0, 2.0]  # restored after probing


def test_constant_function():
    x = np.arange(5.0)
    g, _ = central_difference(lambda: 3.0, x)
    assert np.array_equal(g, np.zeros(5))


def test_non_finite_flagged():
    x = np.array([1.0, 0.0])
    # sqrt is finite at 0 but not just below it
    with np.errstate(invalid="ignore"):
        g, bad = central_difference(lambda: float(np.sqrt(x[1]) + x[0]), x)
    assert bad.tolist() == [False, True]
    assert g[0] == pytest.approx(1.0)


def test_float32_rejected():
    with pytest.raises(TypeError):
        central_difference(lambda: 0.0, np.zeros(2, dtype=np.float32))


def test_relative_error_denominator():
    assert relative_error(np.array([0.0]), np.array([0.0]))[0] == 0.0
    assert relative_error(np.array([1e-9]), np.array([0.0]))[0] == pytest.approx(1e-9 / EPS)
    assert relative_error(np.array([2.0]), np.array([1.0]))[0] == 0.5


def test_report_lines_and_status():
    x = np.array([1.0, 2.0])
    good = check_gradients("sq", 0, lambda: float((x ** 2).sum()), {"x": x}, {"x": 2 * x}, 1e-5)
    wrong = check_gradients("sq", 0, lambda: float((x ** 2).sum()), {"x": x}, {"x": 3 * x}, 1e-5)
    assert good.passed and not wrong.passed
    assert len(good.lines()) == 1 and good.lines()[0].endswith("PASS")
    assert "FAIL" in str(wrong)
    assert GradReport("empty", 0).passed


def test_coordinate_subset():
    x = np.arange(6.0)
    calls = []

    def fn():
        calls.append(1)
        return float((x ** 2).sum())

    rep = check_gradients("sq", 0, fn, {"x": x}, {"x": np.zeros(6)}, 1e-5, coords={"x": np.array([0])})
    assert rep.passed  # d/dx0 at x0 = 0 is 0; the wrong entries were never probed
    assert len(calls) == 2 and "1 of 6" in rep.entries[0].name


def test_kink_guard():
    assert not kinks_clear(relu_inputs=[np.array([1.0, 5 * STEP])])
    assert kinks_clear(relu_inputs=[np.array([1.0, -20 * STEP])])


# --- suite cases ---------------------------------------------------------------------

@pytest.mark.parametrize("op", [op for op in gradsuite.CASES if op != "micro_pipeline"])
def test_suite_operator(op):
    for seed in range(3):
        report = gradsuite.CASES[op](seed)
        assert report.passed, str(report)


def test_micro_pipeline_every_coordinate():
    # 2x8x12x12 feature, 2 RoIs, C_s = 3: all feature and parameter coordinates,
    # each probe through the model's own forward pass
    report = gradsuite.micro_pipeline(0, feature_samples=None, staged=False)
    assert report.passed, str(report)
    assert report.entries[0].name == "feature"


@pytest.mark.parametrize("attention", ["none", "sub-region", "aspect"])
def test_micro_pipeline_variants(attention):
    report = gradsuite.micro_pipeline(1, attention)
    assert report.passed, str(report)


# --- detector pieces -------------------------------------------------------------

SMALL = dict(channels=4, cs=2, backbone_widths=(4, 4), pool_size=3, head_width=6, num_classes=2, precision=64)


def test_backbone_gradients():
    cfg = DetectorConfig(**SMALL)
    rng = np.random.default_rng(0)
    while True:
        params = FSNet(cfg).params
        image = rng.normal(size=(1, 3, 16, 16))
        feat, cache = toy_backbone(image, params)
        if kinks_clear(relu_inputs=[c[2] for c in cache]):
            break
        cfg = DetectorConfig(**{**SMALL, "seed": cfg.seed + 1})
    w = rng.normal(size=feat.shape)
    dimage, grads = toy_backbone_backward(w, cache)
    names = [n for n in params if n.startswith("backbone")]
    report = check_gradients("toy_backbone", 0, lambda: float((w * toy_backbone(image, params)[0]).sum()),
                             {"image": image, **{n: params[n] for n in names}},
                             {"image": dimage, **grads}, TOL_PIECEWISE)
    assert report.passed, str(report)


def test_head_gradients():
    cfg = DetectorConfig(**SMALL)
    rng = np.random.default_rng(1)
    params = FSNet(cfg).params
    for name in ("head.fc.weight", "head.cls.weight", "head.reg.weight"):
        params[name] = rng.normal(0.0, 0.3, params[name].shape)
    while True:
        fhat = rng.normal(size=(4, 2, 3, 3))
        _, _, cache = head_forward(fhat, params)
        if kinks_clear(relu_inputs=[cache[2]]):
            break
    wl, wd = rng.normal(size=(4, 3)), rng.normal(size=(4, 4))
    dfhat, grads = head_backward(wl, wd, params, cache)

    def loss():
        logits, deltas, _ = head_forward(fhat, params)
        return float((wl * logits).sum() + (wd * deltas).sum())

    names = [n for n in params if n.startswith("head")]
    report = check_gradients("head", 1, loss, {"fhat": fhat, **{n: params[n] for n in names}},
                             {"fhat": dfhat, **grads}, TOL_PIECEWISE)
    assert report.passed, str(report)


def _micro_scene(seed, **overrides):
    """A 32x32 image with 4 labelled RoIs, away from every kink."""
    rng = np.random.default_rng(seed)
    while True:
        cfg = DetectorConfig(**{**SMALL, "attention_activation": "none", **overrides,
                                "seed": int(rng.integers(1000))})
        net = FSNet(cfg)
        for name, v in net.params.items():
            if v.ndim > 1 and not name.startswith("backbone"):
                std = 1.0 / np.sqrt(np.prod(v.shape[1:])) * (0.3 if name in ("head.cls.weight", "head.reg.weight") else 1)
                v[...] = rng.normal(0.0, std, v.shape)
        image = rng.uniform(0, 1, (1, 3, 32, 32))
        boxes = np.array([[2.0, 3.0, 20.0, 9.0], [4.0, 2.0, 12.0, 28.0], [8.0, 8.0, 30.0, 30.0], [0, 0, 31.0, 31.0]])
        labels = np.array([1, 2, 0, 1])
        targets = rng.normal(0.0, 0.5, (4, 4))
        logits, deltas, cache = net.forward(image, boxes)
        pools = [(cache.reduced, cache.f)]
        if cache.m_sr is not None:
            pools.append((cache.sr_bank.values, cache.m_sr))
        if cache.m_ar is not None:
            pools.append((cache.ar_bank.values, cache.m_ar))
        fg = labels > 0
        if kinks_clear(relu_inputs=[c[2] for c in cache.backbone] + [cache.head[2]], pools=pools) and \
                np.abs(np.abs(deltas[fg] - targets[fg]) - 1.0).min() >= 10 * STEP:
            return net, [(image, RoiBatch(boxes, labels, targets, np.zeros(4)))]


@pytest.mark.parametrize("activation", ["none", "sigmoid"])
def test_total_loss_gradients_through_detector(activation):
    net, batch = _micro_scene(2, attention_activation=activation)
    _, _, grads = batch_loss(net, batch)

    def loss():
        c, r, _ = batch_loss(net, batch, with_grads=False)
        return c + r

    names = ["reduce.weight", "reduce.bias", "subregion.1.weight", "subregion.5.weight", "subregion.9.bias",
             "aspect.weight", "aspect.bias", "head.fc.weight", "head.cls.bias", "head.reg.weight",
             "backbone.conv4.weight", "backbone.conv1.bias"]
    report = check_gradients(f"detector[{activation}]", 2, loss, {n: net.params[n] for n in names},
                             {n: grads[n] for n in names}, TOL_PIECEWISE)
    assert report.passed, str(report)
