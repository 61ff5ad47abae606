"""Pure numpy pooling kernels. Reference behaviour for ``_ckernels``."""
import numpy as np


def pool_forward(feat, bounds, chan_base, out_channels):
    """Max over each bin of a channel slice of ``feat``.

    feat: (C, H, W) contiguous. bounds: (B, 4) int rows ``y0, y1, x0, x1``
    (half-open). chan_base: (B,) first channel read by each bin.
    Returns ``out`` (B, out_channels) and ``argmax`` (B, out_channels), the
    flat index into ``feat`` of the first maximum in row-major scan order.
    """
    C, H, W = feat.shape
    B = bounds.shape[0]
    out = np.empty((B, out_channels), dtype=feat.dtype)
    argmax = np.empty((B, out_channels), dtype=np.int64)
    lanes = np.arange(out_channels)
    for b in range(B):
        y0, y1, x0, x1 = bounds[b]
        base = chan_base[b]
        block = feat[base:base + out_channels, y0:y1, x0:x1].reshape(out_channels, -1)
        a = block.argmax(axis=1)
        out[b] = block[lanes, a]
        bw = x1 - x0
        argmax[b] = (base + lanes) * (H * W) + (y0 + a // bw) * W + (x0 + a % bw)
    return out, argmax


def pool_backward(dout, argmax, size):
    """Scatter-add ``dout`` into a flat buffer of ``size`` at ``argmax``."""
    acc = np.bincount(argmax.ravel(), weights=dout.ravel().astype(np.float64), minlength=size)
    return acc.astype(dout.dtype)
