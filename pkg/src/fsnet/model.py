"""Feature-selective detector: toy backbone, attention branches, low-capacity head.

Parameters live in a flat ``dict[str, np.ndarray]`` so that optimizers,
checkpoints and gradient checks can treat them uniformly. Forward passes
return a cache consumed by the matching backward pass.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import attention as att
from .geometry import SubRegionGrid, pool_backward, roi_max_pool
from .ops import ConvParams, FcParams, conv2d, conv2d_backward, fully_connected, fully_connected_backward, relu, relu_backward
from .tensor import ShapeError, as_dtype

ATTENTION_VARIANTS = ("none", "sub-region", "aspect", "both")
BACKBONE_STRIDES = (1, 2, 2, 1)


@dataclass
class DetectorConfig:
    channels: int = 64  # backbone output C
    cs: int = 40  # selective channel number C_s
    grid_rows: int = 3
    grid_cols: int = 3
    n_ar: int = 3
    pool_size: int = 7
    head_width: int | None = None  # None: 500, or 100 when cs == 1
    num_classes: int = 3
    aspect_lo: float = 0.75
    aspect_hi: float = 1.3
    attention: str = "both"
    shift_direction: str = "center"
    attention_activation: str = "none"  # or "sigmoid"
    backbone_widths: tuple[int, int] = (16, 32)
    precision: int = 32
    seed: int = 0
    # training
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    iterations: int = 600
    images_per_batch: int = 2
    rois_per_image: int = 128
    fg_fraction: float = 0.25
    fg_iou: float = 0.5
    proposals_per_image: int = 300
    # inference
    nms_threshold: float = 0.3
    score_threshold: float = 0.0

    def __post_init__(self):
        if self.attention not in ATTENTION_VARIANTS:
            raise ValueError(f"attention must be one of {ATTENTION_VARIANTS}, got {self.attention!r}")
        if self.shift_direction not in att.SHIFT_DIRECTIONS:
            raise ValueError(f"shift_direction must be one of {att.SHIFT_DIRECTIONS}")
        if self.attention_activation not in ("none", "sigmoid"):
            raise ValueError("attention_activation must be 'none' or 'sigmoid'")
        self.backbone_widths = tuple(int(v) for v in self.backbone_widths)
        for name in ("channels", "cs", "grid_rows", "grid_cols", "n_ar", "pool_size", "num_classes"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.precision not in (32, 64):
            raise ValueError(f"precision must be 32 or 64, got {self.precision}")
        if self.n_ar not in (1, 3):
            raise ValueError("n_ar must be 1 or 3 (tall / middle / wide)")

    @property
    def resolved_head_width(self) -> int:
        if self.head_width is not None:
            return self.head_width
        return 100 if self.cs == 1 else 500

    @property
    def grid(self) -> SubRegionGrid:
        return SubRegionGrid(self.grid_rows, self.grid_cols)

    @property
    def thresholds(self) -> tuple[float, float]:
        return (self.aspect_lo, self.aspect_hi)

    @property
    def spatial_stride(self) -> int:
        return int(np.prod(BACKBONE_STRIDES))

    @property
    def dtype(self) -> np.dtype:
        return as_dtype(self.precision)

    @property
    def use_subregion(self) -> bool:
        return self.attention in ("sub-region", "both")

    @property
    def use_aspect(self) -> bool:
        return self.attention in ("aspect", "both")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["backbone_widths"] = list(self.backbone_widths)
        return d

    def model_hash(self) -> str:
        """Hash of the fields that determine parameter shapes and semantics."""
        keys = ("channels", "cs", "grid_rows", "grid_cols", "n_ar", "pool_size", "head_width", "num_classes",
                "aspect_lo", "aspect_hi", "attention", "shift_direction", "attention_activation",
                "backbone_widths", "precision", "seed")
        d = self.to_dict()
        text = ";".join(f"{k}={d[k]}" for k in keys)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def param_shapes(cfg: DetectorConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every parameter, in canonical order."""
    w1, w2 = cfg.backbone_widths
    C, cs, P = cfg.channels, cfg.cs, cfg.pool_size
    chans = [3, w1, w2, C, C]
    shapes: dict[str, tuple[int, ...]] = {}
    for i in range(4):
        shapes[f"backbone.conv{i + 1}.weight"] = (chans[i + 1], chans[i], 3, 3)
        shapes[f"backbone.conv{i + 1}.bias"] = (chans[i + 1],)
    shapes["reduce.weight"] = (cs, C, 1, 1)
    shapes["reduce.bias"] = (cs,)
    if cfg.use_subregion:
        for k in range(1, cfg.grid.n + 1):
            shapes[f"subregion.{k}.weight"] = (cs, C, 3, 3)
            shapes[f"subregion.{k}.bias"] = (cs,)
    if cfg.use_aspect:
        shapes["aspect.weight"] = (cfg.n_ar * cs, C, 1, 1)
        shapes["aspect.bias"] = (cfg.n_ar * cs,)
    d_in, hw = P * P * cs, cfg.resolved_head_width
    shapes["head.fc.weight"] = (hw, d_in)
    shapes["head.fc.bias"] = (hw,)
    shapes["head.cls.weight"] = (cfg.num_classes + 1, hw)
    shapes["head.cls.bias"] = (cfg.num_classes + 1,)
    shapes["head.reg.weight"] = (4, hw)
    shapes["head.reg.bias"] = (4,)
    return shapes


def count_params(cfg: DetectorConfig, prefix: str = "") -> int:
    """Closed-form parameter count, optionally restricted to a name prefix."""
    total = 0
    for name, shape in param_shapes(cfg).items():
        if name.startswith(prefix):
            total += int(np.prod(shape))
    return total


def head_first_fc_params(cfg: DetectorConfig) -> int:
    P = cfg.pool_size
    return P * P * cfg.cs * cfg.resolved_head_width + cfg.resolved_head_width


def two_fc4096_params(cfg: DetectorConfig) -> int:
    """Parameters of a classical two-x-4096 fc head over the same pooled input."""
    d_in = cfg.pool_size ** 2 * cfg.cs
    return (d_in * 4096 + 4096) + (4096 * 4096 + 4096) + (4096 * (cfg.num_classes + 1) + cfg.num_classes + 1) \
        + (4096 * 4 + 4)


def init_params(cfg: DetectorConfig, rng: np.random.Generator | None = None) -> dict[str, np.ndarray]:
    """He init for the backbone and reduction, N(0, 0.01) for attention and fc.

    Attention biases start so that the summed attention is about 1.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    dt = cfg.dtype
    n_branches = int(cfg.use_subregion) + int(cfg.use_aspect)
    att_bias = 1.0 / n_branches if n_branches else 0.0
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".bias"):
            value = np.full(shape, att_bias if name.startswith(("subregion", "aspect")) else 0.0)
        elif name.startswith(("backbone", "reduce")):
            fan_in = int(np.prod(shape[1:]))
            value = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
        elif name == "head.reg.weight":
            value = rng.normal(0.0, 0.001, shape)
        else:
            value = rng.normal(0.0, 0.01, shape)
        params[name] = value.astype(dt)
    return params


def _conv(params, name, stride=1, offset=(0, 0)) -> ConvParams:
    return ConvParams(params[f"{name}.weight"], params[f"{name}.bias"], offset=offset, stride=stride)


def _fc(params, name) -> FcParams:
    return FcParams(params[f"{name}.weight"], params[f"{name}.bias"])


def toy_backbone(image: np.ndarray, params: dict[str, np.ndarray]):
    """Four 3x3 conv + ReLU blocks, two of stride 2; returns (features, cache)."""
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"backbone expects (n, 3, H, W), got {image.shape}")
    stride = int(np.prod(BACKBONE_STRIDES))
    if image.shape[2] % stride or image.shape[3] % stride:
        raise ShapeError(f"image size {image.shape[2:]} must be a multiple of {stride}")
    x = image
    cache = []
    for i, s in enumerate(BACKBONE_STRIDES):
        p = _conv(params, f"backbone.conv{i + 1}", stride=s)
        pre = conv2d(x, p)
        cache.append((x, p, pre))
        x = relu(pre)
    return x, cache


def toy_backbone_backward(dfeat: np.ndarray, cache) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    grads = {}
    d = dfeat
    for i in reversed(range(len(cache))):
        x, p, pre = cache[i]
        d = relu_backward(d, pre)
        d, gw, gb = conv2d_backward(d, x, p)
        grads[f"backbone.conv{i + 1}.weight"] = gw
        grads[f"backbone.conv{i + 1}.bias"] = gb
    return d, grads


def head_forward(fhat: np.ndarray, params: dict[str, np.ndarray]):
    """(R, C_s, h, w) selected features -> (logits (R, cls+1), deltas (R, 4), cache)."""
    x = fhat.reshape(fhat.shape[0], -1)
    hidden_pre = fully_connected(x, _fc(params, "head.fc"))
    hidden = relu(hidden_pre)
    logits = fully_connected(hidden, _fc(params, "head.cls"))
    deltas = fully_connected(hidden, _fc(params, "head.reg"))
    return logits, deltas, (fhat.shape, x, hidden_pre, hidden)


def head_backward(dlogits: np.ndarray, ddeltas: np.ndarray, params, cache):
    shape, x, hidden_pre, hidden = cache
    grads = {}
    dh1, grads["head.cls.weight"], grads["head.cls.bias"] = fully_connected_backward(dlogits, hidden, _fc(params, "head.cls"))
    dh2, grads["head.reg.weight"], grads["head.reg.bias"] = fully_connected_backward(ddeltas, hidden, _fc(params, "head.reg"))
    dpre = relu_backward(dh1 + dh2, hidden_pre)
    dx, grads["head.fc.weight"], grads["head.fc.bias"] = fully_connected_backward(dpre, x, _fc(params, "head.fc"))
    return dx.reshape(shape), grads


@dataclass
class ForwardCache:
    feat: np.ndarray
    backbone: list | None
    reduced: np.ndarray
    f: object  # PooledMap over the reduced map
    sr_pre: np.ndarray | None = None
    sr_bank: object = None
    m_sr: object = None
    ar_pre: np.ndarray | None = None
    ar_bank: object = None
    m_ar: object = None
    head: tuple | None = None
    fhat: np.ndarray | None = None
    extras: dict = field(default_factory=dict)


class FSNet:
    """Parameters plus forward/backward for one image at a time."""

    def __init__(self, cfg: DetectorConfig, params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        self.params = init_params(cfg) if params is None else params
        expected = param_shapes(cfg)
        if set(expected) != set(self.params):
            missing = set(expected) ^ set(self.params)
            raise ValueError(f"parameter names do not match config: {sorted(missing)}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"{name}: shape {self.params[name].shape} != {shape}")

    @property
    def num_params(self) -> int:
        return sum(int(v.size) for v in self.params.values())

    def subregion_params(self) -> att.SubregionBankParams:
        cfg = self.cfg
        convs = [_conv(self.params, f"subregion.{k + 1}", offset=off)
                 for k, off in enumerate(att.offset_table(cfg.grid, cfg.shift_direction, cfg.seed))]
        return att.SubregionBankParams(convs, cfg.grid, cfg.shift_direction, cfg.seed)

    def _activate(self, pre):
        if self.cfg.attention_activation == "sigmoid":
            return 1.0 / (1.0 + np.exp(-pre))
        return pre

    def _activate_backward(self, d, pre, post):
        if self.cfg.attention_activation == "sigmoid":
            return d * post * (1.0 - post)
        return d

    def features(self, image: np.ndarray):
        return toy_backbone(image.astype(self.cfg.dtype, copy=False), self.params)

    def forward_from_features(self, feat: np.ndarray, boxes: np.ndarray, backbone_cache=None):
        cfg, P = self.cfg, self.cfg.pool_size
        boxes = np.asarray(boxes, dtype=np.float64)
        if boxes.ndim != 2:
            boxes = boxes.reshape(-1, 4)  # (R, 5) rows carry an image index
        reduced = att.reduce_dim(feat, _conv(self.params, "reduce"))
        f = roi_max_pool(reduced, boxes, P, P, cfg.spatial_stride)
        cache = ForwardCache(feat, backbone_cache, reduced, f)
        m_sr = m_ar = None
        if cfg.use_subregion:
            bank = att.build_subregion_bank(feat, self.subregion_params())
            cache.sr_pre = bank.values
            bank = att.AttentionBank(self._activate(bank.values), bank.groups, bank.cs)
            cache.sr_bank = bank
            cache.m_sr = att.selective_roi_pool(bank, boxes, P, P, "sub-region", cfg.spatial_stride, cfg.grid,
                                                cfg.thresholds)
            m_sr = cache.m_sr.values
        if cfg.use_aspect:
            bank = att.build_aspect_bank(feat, _conv(self.params, "aspect"), cfg.n_ar)
            cache.ar_pre = bank.values
            bank = att.AttentionBank(self._activate(bank.values), bank.groups, bank.cs)
            cache.ar_bank = bank
            cache.m_ar = att.selective_roi_pool(bank, boxes, P, P, "aspect", cfg.spatial_stride, cfg.grid,
                                                cfg.thresholds)
            m_ar = cache.m_ar.values
        fhat = att.merge_selected_features(f.values, m_sr, m_ar)
        logits, deltas, cache.head = head_forward(fhat, self.params)
        cache.fhat = fhat
        return logits, deltas, cache

    def forward(self, image: np.ndarray, boxes: np.ndarray):
        """Scores and deltas for ``boxes`` on a single (1, 3, H, W) image."""
        feat, bcache = self.features(image)
        return self.forward_from_features(feat, boxes, bcache)

    def backward(self, cache: ForwardCache, dlogits: np.ndarray, ddeltas: np.ndarray,
                 through_backbone: bool = True) -> dict[str, np.ndarray]:
        cfg = self.cfg
        dfhat, grads = head_backward(dlogits, ddeltas, self.params, cache.head)
        m_sr = cache.m_sr.values if cache.m_sr is not None else None
        m_ar = cache.m_ar.values if cache.m_ar is not None else None
        df, dm_sr, dm_ar = att.merge_backward(dfhat, cache.f.values, m_sr, m_ar)
        dreduced = pool_backward(df, cache.f)
        dfeat, grads["reduce.weight"], grads["reduce.bias"] = att.reduce_dim_backward(
            dreduced, cache.feat, _conv(self.params, "reduce"))
        if cfg.use_subregion:
            dbank = att.selective_pool_backward(dm_sr, cache.m_sr)
            dbank = self._activate_backward(dbank, cache.sr_pre, cache.sr_bank.values)
            dx, conv_grads = att.build_subregion_bank_backward(dbank, cache.feat, self.subregion_params())
            dfeat += dx
            for k, (gw, gb) in enumerate(conv_grads, start=1):
                grads[f"subregion.{k}.weight"] = gw
                grads[f"subregion.{k}.bias"] = gb
        if cfg.use_aspect:
            dbank = att.selective_pool_backward(dm_ar, cache.m_ar)
            dbank = self._activate_backward(dbank, cache.ar_pre, cache.ar_bank.values)
            dx, grads["aspect.weight"], grads["aspect.bias"] = att.build_aspect_bank_backward(
                dbank, cache.feat, _conv(self.params, "aspect"))
            dfeat += dx
        if through_backbone and cache.backbone is not None:
            _, bgrads = toy_backbone_backward(dfeat, cache.backbone)
            grads.update(bgrads)
        cache.extras["dfeat"] = dfeat
        return grads
