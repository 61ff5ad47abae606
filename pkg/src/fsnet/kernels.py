"""Backend selection for the pooling hot loop.

The compiled ``_ckernels`` extension is used when importable; otherwise the
numpy implementation. Set ``FSNET_BACKEND=python`` to force the fallback.
"""
import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    BACKENDS["cython"] = _ckernels

_requested = os.environ.get("FSNET_BACKEND", "").lower()
if _requested and _requested not in BACKENDS:
    raise ImportError(f"FSNET_BACKEND={_requested!r} unavailable; have {sorted(BACKENDS)}")
BACKEND = _requested or ("cython" if _ckernels is not None else "python")
_impl = BACKENDS[BACKEND]


def use_backend(name: str) -> None:
    """Switch the active backend at runtime (tests and benchmarks)."""
    global BACKEND, _impl
    if name not in BACKENDS:
        raise ValueError(f"unknown or unavailable backend {name!r}; have {sorted(BACKENDS)}")
    BACKEND, _impl = name, BACKENDS[name]


def pool_forward(feat, bounds, chan_base, out_channels):
    feat = np.ascontiguousarray(feat)
    bounds = np.ascontiguousarray(bounds, dtype=np.int64)
    chan_base = np.ascontiguousarray(chan_base, dtype=np.int64)
    if bounds.shape[0] == 0:
        return (np.empty((0, out_channels), dtype=feat.dtype),
                np.empty((0, out_channels), dtype=np.int64))
    return _impl.pool_forward(feat, bounds, chan_base, int(out_channels))


def pool_backward(dout, argmax, size):
    dout = np.ascontiguousarray(dout)
    argmax = np.ascontiguousarray(argmax, dtype=np.int64)
    if dout.size == 0:
        return np.zeros(size, dtype=dout.dtype)
    return _impl.pool_backward(dout, argmax, int(size))
