"""Convolution, fully-connected, activation and loss operators.

Each operator is a pair of plain functions, ``op(...)`` and ``op_backward(...)``.
Backward functions take the upstream gradient plus whatever inputs the forward
needed and return gradients in argument order. There is no tape.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError

MAX_SHIFT = 2


@dataclass
class ConvParams:
    """Weights of one 2-D convolution.

    ``offset`` displaces the whole sampling grid by (rows, cols); +row is
    down, +col is right. ``padding`` defaults to ``k // 2`` so that stride-1
    convolutions preserve spatial size.
    """

    weight: np.ndarray  # (c_out, c_in, k, k)
    bias: np.ndarray  # (c_out,)
    offset: tuple[int, int] = (0, 0)
    stride: int = 1
    padding: int | None = None

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ShapeError(f"conv kernel must be (c_out, c_in, k, k), got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} != ({self.weight.shape[0]},)")
        dr, dc = self.offset
        if abs(dr) > MAX_SHIFT or abs(dc) > MAX_SHIFT:
            raise ValueError(f"shift offset {self.offset} exceeds |d| <= {MAX_SHIFT}")
        self.offset = (int(dr), int(dc))
        if self.padding is None:
            self.padding = self.kernel_size // 2

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def num_params(self) -> int:
        return self.weight.size + self.bias.size


@dataclass
class FcParams:
    weight: np.ndarray  # (d_out, d_in)
    bias: np.ndarray  # (d_out,)

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"fc weight {self.weight.shape} / bias {self.bias.shape} mismatch")

    @property
    def num_params(self) -> int:
        return self.weight.size + self.bias.size


def _conv_geometry(x: np.ndarray, p: ConvParams):
    if x.ndim != 4:
        raise ShapeError(f"conv input must be (n, c, h, w), got {x.shape}")
    n, c, h, w = x.shape
    if c != p.c_in:
        raise ShapeError(f"conv expects {p.c_in} input channels, got {c}")
    k, s, pad = p.kernel_size, p.stride, p.padding
    h_out = (h + 2 * pad - k) // s + 1
    w_out = (w + 2 * pad - k) // s + 1
    if h_out <= 0 or w_out <= 0:
        raise ShapeError(f"input {h}x{w} too small for kernel {k} with padding {pad}")
    dr, dc = p.offset
    margin = pad + max(abs(dr), abs(dc))
    # row of xp sampled by output i, tap u: i*s + u + r0
    r0 = margin - pad + dr
    c0 = margin - pad + dc
    return h_out, w_out, margin, r0, c0


def _columns(x: np.ndarray, p: ConvParams):
    """Gather the k*k shifted views: (n, c, k, k, h_out, w_out)."""
    h_out, w_out, margin, r0, c0 = _conv_geometry(x, p)
    k, s = p.kernel_size, p.stride
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * margin, w + 2 * margin), dtype=x.dtype)
    xp[:, :, margin:margin + h, margin:margin + w] = x
    cols = np.empty((n, c, k, k, h_out, w_out), dtype=x.dtype)
    for u in range(k):
        for v in range(k):
            cols[:, :, u, v] = xp[:, :, r0 + u: r0 + u + s * (h_out - 1) + 1: s,
                                  c0 + v: c0 + v + s * (w_out - 1) + 1: s]
    return cols


def conv2d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Zero-padded cross-correlation; honours ``p.offset`` (shifted convolution)."""
    cols = _columns(x, p)
    out = np.tensordot(p.weight, cols, axes=([1, 2, 3], [1, 2, 3]))  # (o, n, ho, wo)
    out = out.transpose(1, 0, 2, 3) + p.bias[None, :, None, None]
    return np.ascontiguousarray(out, dtype=x.dtype)


def conv2d_backward(dout: np.ndarray, x: np.ndarray, p: ConvParams):
    """Return (dx, dweight, dbias)."""
    h_out, w_out, margin, r0, c0 = _conv_geometry(x, p)
    if dout.shape != (x.shape[0], p.c_out, h_out, w_out):
        raise ShapeError(f"upstream gradient shape {dout.shape} does not match conv output")
    k, s = p.kernel_size, p.stride
    cols = _columns(x, p)
    dweight = np.tensordot(dout, cols, axes=([0, 2, 3], [0, 4, 5]))
    dbias = dout.sum(axis=(0, 2, 3))
    dcols = np.tensordot(p.weight, dout, axes=([0], [1]))  # (c, k, k, n, ho, wo)
    n, c, h, w = x.shape
    dxp = np.zeros((n, c, h + 2 * margin, w + 2 * margin), dtype=x.dtype)
    for u in range(k):
        for v in range(k):
            dxp[:, :, r0 + u: r0 + u + s * (h_out - 1) + 1: s,
                c0 + v: c0 + v + s * (w_out - 1) + 1: s] += dcols[:, u, v].transpose(1, 0, 2, 3)
    dx = dxp[:, :, margin: margin + h, margin: margin + w]
    return np.ascontiguousarray(dx), dweight.astype(x.dtype), dbias.astype(x.dtype)


def shifted_conv2d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """3x3 convolution whose sampling grid is displaced by ``p.offset`` everywhere.

    out(i, j) = sum_{u,v in -1..1} K(u, v) . x(i + u + dr, j + v + dc) + bias,
    with zeros outside the map.
    """
    if p.kernel_size != 3:
        raise ShapeError("shifted convolution uses a 3x3 kernel")
    if p.stride != 1:
        raise ValueError("shifted convolution is stride 1")
    return conv2d(x, p)


shifted_conv2d_backward = conv2d_backward


def fully_connected(x: np.ndarray, p: FcParams) -> np.ndarray:
    """out = W x + b for a vector, or row-wise for a (batch, d_in) matrix."""
    if x.shape[-1] != p.weight.shape[1]:
        raise ShapeError(f"fc expects input length {p.weight.shape[1]}, got {x.shape[-1]}")
    return x @ p.weight.T + p.bias


def fully_connected_backward(dout: np.ndarray, x: np.ndarray, p: FcParams):
    """Return (dx, dweight, dbias)."""
    dx = dout @ p.weight
    if x.ndim == 1:
        return dx, np.outer(dout, x), dout.copy()
    return dx, dout.T @ x, dout.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    # subgradient 0 at exactly 0
    return dout * (x > 0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over rows and its gradient w.r.t. ``logits``.

    A 1-d ``logits`` with an integer label is treated as a single row.
    """
    single = logits.ndim == 1
    z = np.atleast_2d(logits)
    lab = np.atleast_1d(np.asarray(labels))
    n, k = z.shape
    if lab.shape != (n,):
        raise ShapeError(f"{n} logit rows but {lab.shape} labels")
    if lab.size and (lab.min() < 0 or lab.max() >= k):
        raise ValueError(f"label out of range [0, {k - 1}]: {lab.min()}..{lab.max()}")
    lab = lab.astype(np.intp)
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted[np.arange(n), lab] - log_norm
    loss = float(-logp.mean()) if n else 0.0
    grad = np.exp(shifted - log_norm[:, None])
    grad[np.arange(n), lab] -= 1.0
    grad /= max(n, 1)
    return loss, (grad[0] if single else grad)


def smooth_l1(pred: np.ndarray, target: np.ndarray) -> float:
    """Sum over coordinates of 0.5 d^2 (|d| < 1) or |d| - 0.5."""
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1 shape mismatch {pred.shape} vs {target.shape}")
    d = np.abs(pred - target)
    return float(np.where(d < 1.0, 0.5 * d * d, d - 0.5).sum())


def smooth_l1_backward(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    d = pred - target
    return np.where(np.abs(d) < 1.0, d, np.sign(d))
