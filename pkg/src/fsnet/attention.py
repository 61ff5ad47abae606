"""Sub-region and aspect-ratio attention banks, selective RoI pooling and the
merge of attention maps into compacted RoI features.

A bank is an (n, groups * C_s, H, W) array. Group g (1-based) owns channels
``[(g - 1) * C_s, g * C_s)``. Sub-region groups follow row-major order
(top-left ... bottom-right), aspect groups are tall / middle / wide.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (ASPECT_THRESHOLDS, PooledMap, SubRegionGrid, _split_rois, aspect_groups,
                       pool_backward, pool_rois, subregion_table)
from .ops import ConvParams, conv2d, conv2d_backward
from .tensor import ShapeError

SHIFT_DIRECTIONS = ("center", "outside", "random", "none")


def offset_table(grid: SubRegionGrid = SubRegionGrid(), direction: str = "center",
                 seed: int = 0) -> list[tuple[int, int]]:
    """Shift offset of each sub-region's convolution.

    ``center`` points every sub-region toward the RoI center, ``outside``
    negates that, ``random`` is a seeded permutation of the center table and
    ``none`` leaves every convolution unshifted.
    """
    table = grid.center_offsets()
    if direction == "center":
        return table
    if direction == "outside":
        return [(-dr, -dc) for dr, dc in table]
    if direction == "none":
        return [(0, 0)] * len(table)
    if direction == "random":
        perm = np.random.default_rng(seed).permutation(len(table))
        return [table[i] for i in perm]
    raise ValueError(f"unknown shift direction {direction!r}; expected one of {SHIFT_DIRECTIONS}")


@dataclass
class AttentionBank:
    values: np.ndarray  # (n, groups * cs, H, W)
    groups: int
    cs: int

    def __post_init__(self):
        if self.values.ndim != 4 or self.values.shape[1] != self.groups * self.cs:
            raise ShapeError(f"bank with {self.groups} groups x {self.cs} channels "
                             f"cannot have shape {self.values.shape}")

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def group_slice(self, g: int) -> np.ndarray:
        """Channels of 1-based group ``g``."""
        return self.values[:, (g - 1) * self.cs: g * self.cs]


@dataclass
class SubregionBankParams:
    """One shifted 3x3 convolution per sub-region, C -> C_s each."""

    convs: list[ConvParams]
    grid: SubRegionGrid = field(default_factory=SubRegionGrid)
    direction: str = "center"
    seed: int = 0

    def __post_init__(self):
        if len(self.convs) != self.grid.n:
            raise ValueError(f"{self.grid.n} sub-regions need {self.grid.n} convolutions, got {len(self.convs)}")
        expected = offset_table(self.grid, self.direction, self.seed)
        actual = [p.offset for p in self.convs]
        if actual != expected:
            raise ValueError(f"offset table {actual} does not match {self.direction!r} table {expected}")
        shapes = {p.weight.shape for p in self.convs}
        if len(shapes) != 1:
            raise ShapeError(f"sub-region convolutions disagree on shape: {shapes}")
        if self.convs[0].kernel_size != 3:
            raise ShapeError("sub-region attention convolutions are 3x3")

    @property
    def cs(self) -> int:
        return self.convs[0].c_out

    @classmethod
    def init(cls, c_in: int, cs: int, rng: np.random.Generator, grid: SubRegionGrid = SubRegionGrid(),
             direction: str = "center", seed: int = 0, std: float = 0.01, bias: float = 0.5,
             dtype=np.float32) -> "SubregionBankParams":
        convs = [ConvParams(rng.normal(0.0, std, (cs, c_in, 3, 3)).astype(dtype),
                            np.full(cs, bias, dtype=dtype), offset=off)
                 for off in offset_table(grid, direction, seed)]
        return cls(convs, grid, direction, seed)


def reduce_dim(feat: np.ndarray, params: ConvParams) -> np.ndarray:
    """1x1 convolution C -> C_s over the whole image."""
    if params.kernel_size != 1:
        raise ShapeError("dimension reduction is a 1x1 convolution")
    return conv2d(feat, params)


def reduce_dim_backward(dout: np.ndarray, feat: np.ndarray, params: ConvParams):
    return conv2d_backward(dout, feat, params)


def build_subregion_bank(feat: np.ndarray, params: SubregionBankParams) -> AttentionBank:
    outs = [conv2d(feat, p) for p in params.convs]
    return AttentionBank(np.concatenate(outs, axis=1), params.grid.n, params.cs)


def build_subregion_bank_backward(dbank: np.ndarray, feat: np.ndarray, params: SubregionBankParams):
    """Return (dfeat, [(dweight, dbias) per sub-region convolution])."""
    cs = params.cs
    dfeat = np.zeros_like(feat)
    grads = []
    for k, p in enumerate(params.convs):
        dx, dw, db = conv2d_backward(np.ascontiguousarray(dbank[:, k * cs:(k + 1) * cs]), feat, p)
        dfeat += dx
        grads.append((dw, db))
    return dfeat, grads


def build_aspect_bank(feat: np.ndarray, params: ConvParams, groups: int = 3) -> AttentionBank:
    """Single 1x1 convolution C -> groups * C_s."""
    if params.kernel_size != 1:
        raise ShapeError("aspect attention bank uses a 1x1 convolution")
    if params.c_out % groups:
        raise ShapeError(f"{params.c_out} output channels not divisible by {groups} groups")
    return AttentionBank(conv2d(feat, params), groups, params.c_out // groups)


def build_aspect_bank_backward(dbank: np.ndarray, feat: np.ndarray, params: ConvParams):
    return conv2d_backward(dbank, feat, params)


def selection_groups(boxes: np.ndarray, h: int, w: int, mode: str, grid: SubRegionGrid = SubRegionGrid(),
                     thresholds=ASPECT_THRESHOLDS, n_ar: int = 3) -> np.ndarray:
    """(R, h, w) 1-based bank group read by each pooling bin.

    With a single aspect group every RoI reads group 1.
    """
    R = len(boxes)
    if mode in ("sub-region", "subregion"):
        return np.broadcast_to(subregion_table(h, w, grid), (R, h, w)).copy()
    if mode == "aspect":
        if n_ar == 1:
            return np.ones((R, h, w), dtype=np.int64)
        if n_ar != 3:
            raise ValueError(f"aspect grouping is defined for 1 or 3 groups, not {n_ar}")
        return np.broadcast_to(aspect_groups(boxes, thresholds)[:, None, None], (R, h, w)).copy()
    raise ValueError(f"unknown pooling mode {mode!r}")


def selective_roi_pool(bank: AttentionBank, rois, h: int = 7, w: int = 7, mode: str = "sub-region",
                       spatial_stride: int = 1, grid: SubRegionGrid = SubRegionGrid(),
                       thresholds=ASPECT_THRESHOLDS) -> PooledMap:
    """Per-bin max over the bank's channel slice picked by the bin's group.

    Sub-region mode picks the group covering most of each bin; aspect mode
    uses the RoI's aspect group for every bin. Returns (R, C_s, h, w) values
    with argmax provenance.
    """
    boxes, idx = _split_rois(rois)
    if mode in ("sub-region", "subregion") and bank.groups != grid.n:
        raise ShapeError(f"bank has {bank.groups} groups, grid has {grid.n} sub-regions")
    groups = selection_groups(boxes, h, w, mode, grid, thresholds, bank.groups)
    if groups.size and groups.max() > bank.groups:
        raise ShapeError(f"group {groups.max()} exceeds bank's {bank.groups} groups")
    return pool_rois(bank.values, boxes, idx, h, w, spatial_stride, groups, bank.cs)


def selective_pool_backward(dmap: np.ndarray, pooled: PooledMap | None) -> np.ndarray:
    """Gradient w.r.t. the bank values; each cell adds at its argmax."""
    if pooled is None:
        raise ValueError("selective_pool_backward needs the forward provenance")
    return pool_backward(dmap, pooled)


def merge_selected_features(f: np.ndarray, m_sr: np.ndarray | None, m_ar: np.ndarray | None) -> np.ndarray:
    """f * (M_sr + M_ar). A missing map drops out of the sum; with neither, f is returned."""
    att = _attention_sum(f, m_sr, m_ar)
    return f if att is None else f * att


def merge_backward(dout: np.ndarray, f: np.ndarray, m_sr: np.ndarray | None, m_ar: np.ndarray | None):
    """Return (df, dm_sr, dm_ar); entries for missing maps are None."""
    att = _attention_sum(f, m_sr, m_ar)
    if att is None:
        return dout, None, None
    datt = dout * f
    return dout * att, (datt if m_sr is not None else None), (datt if m_ar is not None else None)


def _attention_sum(f, m_sr, m_ar):
    maps = [m for m in (m_sr, m_ar) if m is not None]
    for m in maps:
        if m.shape != f.shape:
            raise ShapeError(f"attention map shape {m.shape} != feature shape {f.shape}")
    if not maps:
        return None
    return maps[0] + maps[1] if len(maps) == 2 else maps[0]
