"""RoI geometry: projection, pooling bins, sub-region assignment, RoI max
pooling, IoU/NMS, box deltas and minibatch sampling.

Boxes are ``(x1, y1, x2, y2)`` in continuous input-image pixel coordinates
with width ``x2 - x1`` and height ``y2 - y1``. Pooled maps are laid out
``(num_rois, channels, h, w)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .tensor import ShapeError

ASPECT_THRESHOLDS = (0.75, 1.3)
BBOX_STDS = np.array([0.1, 0.1, 0.2, 0.2])


@dataclass(frozen=True)
class RoI:
    image_index: int
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate RoI {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def box(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def clipped(self, width: float, height: float) -> "RoI":
        x1 = min(max(self.x1, 0.0), width - 1.0)
        y1 = min(max(self.y1, 0.0), height - 1.0)
        x2 = min(max(self.x2, x1 + 1.0), width)
        y2 = min(max(self.y2, y1 + 1.0), height)
        return RoI(self.image_index, x1, y1, x2, y2)


def as_boxes(rois) -> np.ndarray:
    """Accept a list of RoI or an (R, 4) array; return float64 (R, 4)."""
    if isinstance(rois, np.ndarray):
        boxes = rois.astype(np.float64, copy=False)
    else:
        rois = list(rois)
        boxes = np.array([r.box for r in rois], dtype=np.float64).reshape(len(rois), 4)
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise ShapeError(f"boxes must be (R, 4), got {boxes.shape}")
    return boxes


# --- aspect ratio and sub-regions -----------------------------------------

def aspect_group(roi, thresholds: tuple[float, float] = ASPECT_THRESHOLDS) -> int:
    """1 for tall (w/h below the low threshold), 3 for wide, 2 otherwise.

    The ratio is width / height; boundary values land in group 2.
    """
    box = roi.box if isinstance(roi, RoI) else np.asarray(roi, dtype=np.float64)
    ratio = (box[2] - box[0]) / (box[3] - box[1])
    lo, hi = thresholds
    if ratio < lo:
        return 1
    if ratio > hi:
        return 3
    return 2


def aspect_groups(boxes: np.ndarray, thresholds=ASPECT_THRESHOLDS) -> np.ndarray:
    ratio = (boxes[:, 2] - boxes[:, 0]) / (boxes[:, 3] - boxes[:, 1])
    lo, hi = thresholds
    return np.where(ratio < lo, 1, np.where(ratio > hi, 3, 2)).astype(np.int64)


@dataclass(frozen=True)
class SubRegionGrid:
    rows: int = 3
    cols: int = 3

    @property
    def n(self) -> int:
        return self.rows * self.cols

    def rectangles(self, roi) -> list[tuple[float, float, float, float]]:
        """Sub-region boxes G_1..G_n of an RoI in row-major order."""
        x1, y1, x2, y2 = roi.box if isinstance(roi, RoI) else roi
        xs = [x1 + (x2 - x1) * c / self.cols for c in range(self.cols + 1)]
        ys = [y1 + (y2 - y1) * r / self.rows for r in range(self.rows + 1)]
        xs[-1], ys[-1] = x2, y2
        return [(xs[c], ys[r], xs[c + 1], ys[r + 1])
                for r in range(self.rows) for c in range(self.cols)]

    def center_offsets(self) -> list[tuple[int, int]]:
        """Shift per sub-region pointing toward the RoI center, (row, col).

        For 3x3 this is (1,1), (1,0), (1,-1), (0,1), (0,0), ... (-1,-1).
        """
        def toward(idx, count):
            twice = (count - 1) - 2 * idx
            return (twice > 0) - (twice < 0)
        return [(toward(r, self.rows), toward(c, self.cols))
                for r in range(self.rows) for c in range(self.cols)]


def _axis_assignment(bins: int, parts: int) -> list[int]:
    """0-based part with the largest overlap for each of ``bins`` equal cells.

    Integer arithmetic on a common scale of bins*parts; ties go to the
    smaller part index.
    """
    out = []
    for m in range(bins):
        lo, hi = m * parts, (m + 1) * parts
        overlaps = [max(0, min(hi, (r + 1) * bins) - max(lo, r * bins)) for r in range(parts)]
        out.append(int(np.argmax(overlaps)))
    return out


def subregion_table(h: int, w: int, grid: SubRegionGrid = SubRegionGrid()) -> np.ndarray:
    """(h, w) array of 1-based sub-region indices for every pooling bin."""
    rows = _axis_assignment(h, grid.rows)
    cols = _axis_assignment(w, grid.cols)
    return np.array([[r * grid.cols + c + 1 for c in cols] for r in rows], dtype=np.int64)


def bin_subregion_index(m: int, n: int, h: int, w: int, grid: SubRegionGrid = SubRegionGrid()) -> int:
    """Sub-region (1-based) covering most of pooling bin (m, n), 1-based."""
    if not (1 <= m <= h and 1 <= n <= w):
        raise ValueError(f"bin ({m}, {n}) outside {h}x{w}")
    return int(subregion_table(h, w, grid)[m - 1, n - 1])


# --- projection and pooling bins ------------------------------------------

def project_boxes(boxes: np.ndarray, spatial_stride: int, height: int, width: int) -> np.ndarray:
    """Feature-map extents ``(y0, y1, x0, x1)``, half-open, never empty.

    floor(start / stride), ceil(end / stride), then clamp so every RoI keeps
    at least one cell.
    """
    x0 = np.floor(boxes[:, 0] / spatial_stride).astype(np.int64)
    y0 = np.floor(boxes[:, 1] / spatial_stride).astype(np.int64)
    x1 = np.ceil(boxes[:, 2] / spatial_stride).astype(np.int64)
    y1 = np.ceil(boxes[:, 3] / spatial_stride).astype(np.int64)
    x0 = np.clip(x0, 0, width - 1)
    y0 = np.clip(y0, 0, height - 1)
    x1 = np.clip(x1, x0 + 1, width)
    y1 = np.clip(y1, y0 + 1, height)
    return np.stack([y0, y1, x0, x1], axis=1)


def bin_bounds(extents: np.ndarray, h: int, w: int) -> np.ndarray:
    """(R, h, w, 4) half-open bin rectangles ``y0, y1, x0, x1``.

    Bin m spans [floor(m*L/h), ceil((m+1)*L/h)) of an extent of length L.
    """
    y0, y1, x0, x1 = (extents[:, i:i + 1] for i in range(4))
    rh, rw = y1 - y0, x1 - x0
    m = np.arange(h)[None, :]
    n = np.arange(w)[None, :]
    ys = y0 + (m * rh) // h
    ye = y0 - ((-(m + 1) * rh) // h)
    xs = x0 + (n * rw) // w
    xe = x0 - ((-(n + 1) * rw) // w)
    R = extents.shape[0]
    out = np.empty((R, h, w, 4), dtype=np.int64)
    out[..., 0] = ys[:, :, None]
    out[..., 1] = ye[:, :, None]
    out[..., 2] = xs[:, None, :]
    out[..., 3] = xe[:, None, :]
    return out


@dataclass
class PooledMap:
    """Pooled values plus argmax provenance for the backward pass.

    ``argmax`` holds flat indices into the pooled source array of shape
    ``source_shape``; ``groups`` holds the 1-based channel group each bin
    read from (all ones for plain RoI pooling).
    """

    values: np.ndarray  # (R, C_out, h, w)
    argmax: np.ndarray  # (R, C_out, h, w)
    source_shape: tuple[int, ...]
    groups: np.ndarray  # (R, h, w)
    bounds: np.ndarray  # (R, h, w, 4) bin rectangles on the source map
    image_index: np.ndarray  # (R,)


def pool_rois(source: np.ndarray, boxes: np.ndarray, image_index: np.ndarray, h: int, w: int,
              spatial_stride: int, groups: np.ndarray, out_channels: int) -> PooledMap:
    """Shared driver: max-pool channel slice ``(g-1)*out_channels`` per bin."""
    if source.ndim != 4:
        raise ShapeError(f"pooling source must be (n, c, H, W), got {source.shape}")
    N, C, H, W = source.shape
    R = boxes.shape[0]
    if groups.shape != (R, h, w):
        raise ShapeError(f"groups shape {groups.shape} != {(R, h, w)}")
    if R and (groups.min() < 1 or groups.max() * out_channels > C):
        raise ShapeError(f"group index out of range for {C} channels of {out_channels}")
    values = np.empty((R, out_channels, h, w), dtype=source.dtype)
    argmax = np.empty((R, out_channels, h, w), dtype=np.int64)
    bounds = bin_bounds(project_boxes(boxes, spatial_stride, H, W), h, w)
    for img in np.unique(image_index):
        sel = np.flatnonzero(image_index == img)
        b = bounds[sel].reshape(-1, 4)
        base = ((groups[sel] - 1) * out_channels).reshape(-1)
        out, arg = kernels.pool_forward(source[img], b, base, out_channels)
        values[sel] = out.reshape(len(sel), h, w, out_channels).transpose(0, 3, 1, 2)
        argmax[sel] = (arg + img * C * H * W).reshape(len(sel), h, w, out_channels).transpose(0, 3, 1, 2)
    return PooledMap(values, argmax, source.shape, groups, bounds, image_index)


def pool_backward(dvalues: np.ndarray, pooled: PooledMap) -> np.ndarray:
    """Route each pooled gradient to its argmax position in the source."""
    if pooled.argmax is None:
        raise ValueError("missing argmax provenance")
    if dvalues.shape != pooled.values.shape:
        raise ShapeError(f"gradient shape {dvalues.shape} != pooled shape {pooled.values.shape}")
    size = int(np.prod(pooled.source_shape))
    flat = kernels.pool_backward(dvalues.reshape(1, -1), pooled.argmax.reshape(1, -1), size)
    return flat.reshape(pooled.source_shape)


def _split_rois(rois) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(rois, np.ndarray):
        if rois.ndim == 2 and rois.shape[1] == 5:
            return rois[:, 1:].astype(np.float64), rois[:, 0].astype(np.int64)
        boxes = as_boxes(rois)
        return boxes, np.zeros(len(boxes), dtype=np.int64)
    rois = list(rois)
    return as_boxes(rois), np.array([r.image_index for r in rois], dtype=np.int64)


def roi_max_pool(feat: np.ndarray, rois, h: int = 7, w: int = 7, spatial_stride: int = 1) -> PooledMap:
    """Classical RoI max pooling over all channels of ``feat``.

    ``rois`` is a list of :class:`RoI`, an (R, 4) box array (image 0) or an
    (R, 5) array ``(image_index, x1, y1, x2, y2)``.
    """
    boxes, idx = _split_rois(rois)
    groups = np.ones((len(boxes), h, w), dtype=np.int64)
    return pool_rois(feat, boxes, idx, h, w, spatial_stride, groups, feat.shape[1])


roi_max_pool_backward = pool_backward


# --- IoU, NMS, deltas -----------------------------------------------------

def iou(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(iou_matrix(a[None], b[None])[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def nms(boxes: np.ndarray, scores: np.ndarray, threshold: float = 0.3) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending score order.

    Equal scores keep the lower index first. A box is dropped when its IoU
    with an already kept box exceeds ``threshold``.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores)
    if len(boxes) == 0:
        return np.empty(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    overlaps = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= overlaps[i] > threshold
    return np.array(keep, dtype=np.int64)


def encode_delta(gt: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    """Center/size parameterization ``(tx, ty, tw, th)``, unnormalized."""
    gt = np.asarray(gt, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    aw = anchor[..., 2] - anchor[..., 0]
    ah = anchor[..., 3] - anchor[..., 1]
    ax = anchor[..., 0] + 0.5 * aw
    ay = anchor[..., 1] + 0.5 * ah
    gw = gt[..., 2] - gt[..., 0]
    gh = gt[..., 3] - gt[..., 1]
    gx = gt[..., 0] + 0.5 * gw
    gy = gt[..., 1] + 0.5 * gh
    return np.stack([(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=-1)


def decode_delta(delta: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    delta = np.asarray(delta, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    aw = anchor[..., 2] - anchor[..., 0]
    ah = anchor[..., 3] - anchor[..., 1]
    ax = anchor[..., 0] + 0.5 * aw
    ay = anchor[..., 1] + 0.5 * ah
    # exp overflow guard for untrained heads
    dw = np.minimum(delta[..., 2], math.log(1000.0 / 16))
    dh = np.minimum(delta[..., 3], math.log(1000.0 / 16))
    cx = ax + delta[..., 0] * aw
    cy = ay + delta[..., 1] * ah
    w = aw * np.exp(dw)
    h = ah * np.exp(dh)
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def clip_boxes(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    out = boxes.copy()
    out[..., 0::2] = np.clip(out[..., 0::2], 0, width)
    out[..., 1::2] = np.clip(out[..., 1::2], 0, height)
    return out


# --- minibatch sampling ---------------------------------------------------

@dataclass
class RoiBatch:
    boxes: np.ndarray  # (B, 4)
    labels: np.ndarray  # (B,) 0 = background
    targets: np.ndarray  # (B, 4) normalized deltas, zero for background
    max_iou: np.ndarray  # (B,)

    @property
    def num_fg(self) -> int:
        return int((self.labels > 0).sum())


def label_proposals(proposals: np.ndarray, gt_boxes: np.ndarray, gt_classes: Sequence[int],
                    fg_iou: float = 0.5):
    """Per-proposal (label, matched gt index, max IoU); label 0 below ``fg_iou``."""
    proposals = as_boxes(proposals)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    if len(gt_boxes) == 0:
        zeros = np.zeros(len(proposals), dtype=np.int64)
        return zeros, zeros, np.zeros(len(proposals))
    ov = iou_matrix(proposals, gt_boxes)
    match = ov.argmax(axis=1)
    best = ov[np.arange(len(proposals)), match]
    labels = np.where(best >= fg_iou, gt_classes[match], 0)
    return labels.astype(np.int64), match, best


def sample_rois(proposals, gt_boxes, gt_classes, rng: np.random.Generator, batch_size: int = 256,
                fg_fraction: float = 0.25, fg_iou: float = 0.5) -> RoiBatch:
    """Label proposals and draw a minibatch with at most ``fg_fraction`` foreground.

    Foreground is capped by availability; background fills the remainder
    (also capped by availability). Sampling is without replacement.
    """
    proposals = as_boxes(proposals)
    if len(proposals) == 0:
        raise ValueError("sample_rois needs at least one proposal")
    labels, match, best = label_proposals(proposals, gt_boxes, gt_classes, fg_iou)
    fg = np.flatnonzero(labels > 0)
    bg = np.flatnonzero(labels == 0)
    n_fg = min(int(round(batch_size * fg_fraction)), len(fg))
    n_bg = min(batch_size - n_fg, len(bg))
    if n_fg < len(fg):
        fg = rng.choice(fg, size=n_fg, replace=False)
    if n_bg < len(bg):
        bg = rng.choice(bg, size=n_bg, replace=False)
    keep = np.concatenate([fg, bg]).astype(np.int64)
    boxes = proposals[keep]
    lab = labels[keep]
    targets = np.zeros((len(keep), 4))
    if n_fg:
        gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
        targets[:n_fg] = encode_delta(gt[match[keep[:n_fg]]], boxes[:n_fg]) / BBOX_STDS
    return RoiBatch(boxes, lab, targets, best[keep])
