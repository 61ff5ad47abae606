"""Seeded finite-difference checks for every differentiable operator and for
the composed detector micro-pipeline. Used by the ``gradcheck`` command."""
from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import attention as att
from .gradcheck import STEP, TOL_PIECEWISE, TOL_SMOOTH, GradReport, check_gradients, kinks_clear
from .geometry import roi_max_pool, pool_backward
from .model import DetectorConfig, FSNet, head_forward
from .ops import (ConvParams, FcParams, conv2d, conv2d_backward, fully_connected, fully_connected_backward, relu,
                  relu_backward, shifted_conv2d, smooth_l1, smooth_l1_backward, softmax_cross_entropy)

MAX_RESAMPLES = 200


def _boxes(rng, n, size, min_side=4.0):
    xy = rng.uniform(0, size - min_side, (n, 2))
    wh = rng.uniform(min_side, size, (n, 2))
    x2 = np.minimum(xy[:, 0] + wh[:, 0], size - 1)
    y2 = np.minimum(xy[:, 1] + wh[:, 1], size - 1)
    return np.stack([xy[:, 0], xy[:, 1], np.maximum(x2, xy[:, 0] + 1), np.maximum(y2, xy[:, 1] + 1)], axis=1)


def _conv(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 3, 6, 6))
    p = ConvParams(rng.normal(size=(2, 3, 3, 3)), rng.normal(size=2), stride=1 + seed % 2)
    w = rng.normal(size=conv2d(x, p).shape)
    dx, dw, db = conv2d_backward(w, x, p)
    return check_gradients("conv2d", seed, lambda: float((w * conv2d(x, p)).sum()),
                           {"x": x, "weight": p.weight, "bias": p.bias}, {"x": dx, "weight": dw, "bias": db},
                           TOL_SMOOTH)


def _shifted_conv(seed):
    rng = np.random.default_rng(seed)
    offset = att.offset_table()[seed % 9]
    x = rng.normal(size=(1, 3, 6, 6))
    p = ConvParams(rng.normal(size=(2, 3, 3, 3)), rng.normal(size=2), offset=offset)
    w = rng.normal(size=(1, 2, 6, 6))
    dx, dw, db = conv2d_backward(w, x, p)
    return check_gradients(f"shifted_conv2d{offset}", seed, lambda: float((w * shifted_conv2d(x, p)).sum()),
                           {"x": x, "weight": p.weight, "bias": p.bias}, {"x": dx, "weight": dw, "bias": db},
                           TOL_SMOOTH)


def _fc(seed):
    rng = np.random.default_rng(seed)
    p = FcParams(rng.normal(size=(5, 12)), rng.normal(size=5))
    x = rng.normal(size=(3, 12))
    w = rng.normal(size=(3, 5))
    dx, dw, db = fully_connected_backward(w, x, p)
    return check_gradients("fully_connected", seed, lambda: float((w * fully_connected(x, p)).sum()),
                           {"x": x, "weight": p.weight, "bias": p.bias}, {"x": dx, "weight": dw, "bias": db},
                           TOL_SMOOTH)


def _relu(seed):
    rng = np.random.default_rng(seed)
    for _ in range(MAX_RESAMPLES):
        x = rng.normal(size=(2, 3, 4, 4))
        if kinks_clear(relu_inputs=[x]):
            break
    w = rng.normal(size=x.shape)
    return check_gradients("relu", seed, lambda: float((w * relu(x)).sum()), {"x": x},
                           {"x": relu_backward(w, x)}, TOL_PIECEWISE)


def _losses(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(6, 4))
    labels = rng.integers(0, 4, 6)
    for _ in range(MAX_RESAMPLES):
        pred = rng.normal(size=(6, 4)) * 1.5
        target = rng.normal(size=(6, 4))
        if np.abs(np.abs(pred - target) - 1.0).min() >= 10 * STEP:
            break
    _, g = softmax_cross_entropy(logits, labels)

    def loss():
        return softmax_cross_entropy(logits, labels)[0] + smooth_l1(pred, target)

    return check_gradients("softmax_ce+smooth_l1", seed, loss, {"logits": logits, "pred": pred},
                           {"logits": g, "pred": smooth_l1_backward(pred, target)}, TOL_SMOOTH)


def _roi_pool(seed):
    rng = np.random.default_rng(seed)
    for _ in range(MAX_RESAMPLES):
        feat = rng.normal(size=(2, 3, 10, 10))
        rois = np.concatenate([[[0], [1]], _boxes(rng, 2, 40)], axis=1)
        pooled = roi_max_pool(feat, rois, 3, 3, 4)
        if kinks_clear(pools=[(feat, pooled)]):
            break
    w = rng.normal(size=pooled.values.shape)
    return check_gradients("roi_max_pool", seed, lambda: float((w * roi_max_pool(feat, rois, 3, 3, 4).values).sum()),
                           {"feat": feat}, {"feat": pool_backward(w, pooled)}, TOL_PIECEWISE)


def _selective_pool(mode):
    groups = 9 if mode == "sub-region" else 3

    def case(seed):
        rng = np.random.default_rng(seed)
        cs = 2
        for _ in range(MAX_RESAMPLES):
            bank = att.AttentionBank(rng.normal(size=(1, groups * cs, 8, 8)), groups, cs)
            boxes = _boxes(rng, 2, 32)
            pooled = att.selective_roi_pool(bank, boxes, 3, 3, mode, 4)
            if kinks_clear(pools=[(bank.values, pooled)]):
                break
        w = rng.normal(size=pooled.values.shape)

        def loss():
            return float((w * att.selective_roi_pool(bank, boxes, 3, 3, mode, 4).values).sum())

        return check_gradients(f"selective_roi_pool[{mode}]", seed, loss, {"bank": bank.values},
                               {"bank": att.selective_pool_backward(w, pooled)}, TOL_PIECEWISE)

    return case


def _merge(seed):
    rng = np.random.default_rng(seed)
    f, a, b = (rng.normal(size=(2, 3, 4, 4)) for _ in range(3))
    w = rng.normal(size=f.shape)
    df, da, db = att.merge_backward(w, f, a, b)
    return check_gradients("merge", seed, lambda: float((w * att.merge_selected_features(f, a, b)).sum()),
                           {"f": f, "m_sr": a, "m_ar": b}, {"f": df, "m_sr": da, "m_ar": db}, TOL_SMOOTH)


MICRO_CONFIG = dict(channels=8, cs=3, pool_size=3, head_width=6, num_classes=2, precision=64)


def micro_pipeline_net(seed: int, attention: str = "both", **overrides) -> FSNet:
    cfg = DetectorConfig(**{**MICRO_CONFIG, "attention": attention, "seed": seed, **overrides})
    net = FSNet(cfg)
    rng = np.random.default_rng([seed, 7])
    for name, v in net.params.items():
        # fan-in scaling keeps activations O(1); saturated softmax gradients drown in FD noise
        std = 1.0 / np.sqrt(np.prod(v.shape[1:])) if v.ndim > 1 else 0.3
        if name in ("head.cls.weight", "head.reg.weight"):
            std *= 0.3  # logits of order 1, away from softmax saturation
        v[...] = rng.normal(0.5 if name.startswith(("subregion", "aspect")) and v.ndim == 1 else 0.0, std, v.shape)
    return net


class _StagedLoss:
    """The micro-pipeline loss, recomputing only the stages a parameter feeds.

    Values upstream of the perturbed tensor are cached, so every closure
    returns exactly what a full forward pass would.
    """

    def __init__(self, net: FSNet, feat, rois, labels, targets):
        if net.cfg.attention_activation != "none":
            raise ValueError("staged loss assumes unactivated attention banks")
        self.net, self.feat, self.rois, self.labels, self.targets = net, feat, rois, labels, targets
        self.fg = labels > 0
        cfg = net.cfg
        self.offsets = att.offset_table(cfg.grid, cfg.shift_direction, cfg.seed)
        self.f = self._f()
        self.sr_outs = [self._sr_out(k) for k in range(cfg.grid.n)] if cfg.use_subregion else None
        self.m_sr = self._m_sr(self.sr_outs) if cfg.use_subregion else None
        self.m_ar = self._m_ar() if cfg.use_aspect else None

    def _conv(self, name, offset=(0, 0)):
        return ConvParams(self.net.params[f"{name}.weight"], self.net.params[f"{name}.bias"], offset=offset)

    def _f(self):
        P, stride = self.net.cfg.pool_size, self.net.cfg.spatial_stride
        return roi_max_pool(att.reduce_dim(self.feat, self._conv("reduce")), self.rois, P, P, stride).values

    def _sr_out(self, k):
        return conv2d(self.feat, self._conv(f"subregion.{k + 1}", self.offsets[k]))

    def _m_sr(self, outs):
        cfg = self.net.cfg
        bank = att.AttentionBank(np.concatenate(outs, axis=1), cfg.grid.n, cfg.cs)
        return att.selective_roi_pool(bank, self.rois, cfg.pool_size, cfg.pool_size, "sub-region",
                                      cfg.spatial_stride, cfg.grid, cfg.thresholds).values

    def _m_ar(self):
        cfg = self.net.cfg
        bank = att.build_aspect_bank(self.feat, self._conv("aspect"), cfg.n_ar)
        return att.selective_roi_pool(bank, self.rois, cfg.pool_size, cfg.pool_size, "aspect",
                                      cfg.spatial_stride, cfg.grid, cfg.thresholds).values

    def head_loss(self, f=None, m_sr=None, m_ar=None) -> float:
        fhat = att.merge_selected_features(self.f if f is None else f, self.m_sr if m_sr is None else m_sr,
                                           self.m_ar if m_ar is None else m_ar)
        logits, deltas, _ = head_forward(fhat, self.net.params)
        return self.combine(logits, deltas)

    def combine(self, logits, deltas) -> float:
        fg = self.fg
        return (softmax_cross_entropy(logits, self.labels)[0]
                + smooth_l1(deltas[fg], self.targets[fg]) / len(self.labels))

    def full(self) -> float:
        logits, deltas, _ = self.net.forward_from_features(self.feat, self.rois)
        return self.combine(logits, deltas)

    def closures(self) -> dict[str, Callable[[], float]]:
        out = {"feature": self.full}
        for name in self.net.params:
            if name.startswith("head."):
                out[name] = self.head_loss
            elif name.startswith("reduce."):
                out[name] = lambda: self.head_loss(f=self._f())
            elif name.startswith("aspect."):
                out[name] = lambda: self.head_loss(m_ar=self._m_ar())
            elif name.startswith("subregion."):
                k = int(name.split(".")[1]) - 1
                out[name] = (lambda k=k: self.head_loss(
                    m_sr=self._m_sr(self.sr_outs[:k] + [self._sr_out(k)] + self.sr_outs[k + 1:])))
        return out


def micro_pipeline(seed: int, attention: str = "both", feature_samples: int | None = 48,
                   staged: bool = True) -> GradReport:
    """Reduction, attention banks, selective pooling, merge, head and losses
    over a 2x8x12x12 feature with 2 RoIs (one per image) and C_s = 3.

    Every parameter coordinate is probed. The feature input needs a full
    forward per probe, so by default only ``feature_samples`` seeded
    coordinates of it are checked; pass None to probe all of them.
    ``staged=False`` evaluates every probe with the model's own forward pass.
    """
    rng = np.random.default_rng(seed)
    for _ in range(MAX_RESAMPLES):
        net = micro_pipeline_net(int(rng.integers(2**31)), attention)
        feat = rng.normal(size=(2, 8, 12, 12))
        rois = np.concatenate([[[0], [1]], _boxes(rng, 2, 48, min_side=12.0)], axis=1)
        labels = np.array([1, int(rng.integers(0, 3))])
        targets = rng.normal(0.0, 0.5, (2, 4))
        logits, deltas, cache = net.forward_from_features(feat, rois)
        pools = [(cache.reduced, cache.f)]
        if cache.m_sr is not None:
            pools.append((cache.sr_bank.values, cache.m_sr))
        if cache.m_ar is not None:
            pools.append((cache.ar_bank.values, cache.m_ar))
        fg = labels > 0
        if kinks_clear(relu_inputs=[cache.head[2]], pools=pools) and \
                np.abs(np.abs(deltas[fg] - targets[fg]) - 1.0).min() >= 10 * STEP:
            break

    staged_loss = _StagedLoss(net, feat, rois, labels, targets)
    if staged_loss.head_loss() != staged_loss.full():
        raise AssertionError("staged loss disagrees with the model forward pass")
    loss = staged_loss.closures() if staged else staged_loss.full

    _, dlogits = softmax_cross_entropy(logits, labels)
    ddeltas = np.zeros_like(deltas)
    ddeltas[fg] = smooth_l1_backward(deltas[fg], targets[fg]) / len(labels)
    grads = net.backward(cache, dlogits, ddeltas, through_backbone=False)
    params = {"feature": feat, **net.params}
    analytic = {"feature": cache.extras["dfeat"], **grads}
    params = {k: v for k, v in params.items() if k in analytic}
    coords = None
    if feature_samples is not None and feature_samples < feat.size:
        coords = {"feature": np.sort(rng.choice(feat.size, feature_samples, replace=False))}
    return check_gradients(f"micro_pipeline[{attention}]", seed, loss, params, analytic, TOL_PIECEWISE,
                           coords=coords)


CASES: dict[str, Callable[[int], GradReport]] = {
    "conv2d": _conv,
    "shifted_conv2d": _shifted_conv,
    "fully_connected": _fc,
    "relu": _relu,
    "losses": _losses,
    "roi_max_pool": _roi_pool,
    "selective_roi_pool[sub-region]": _selective_pool("sub-region"),
    "selective_roi_pool[aspect]": _selective_pool("aspect"),
    "merge": _merge,
    "micro_pipeline": micro_pipeline,
}


def run_suite(seeds=range(20), ops=None) -> tuple[list[GradReport], float]:
    """Run every case for every seed; returns (reports, seconds)."""
    start = time.perf_counter()
    reports = [CASES[op](seed) for op in (ops or CASES) for seed in seeds]
    return reports, time.perf_counter() - start
