"""Central-difference gradient oracle and the margin checks that keep finite
differences away from ReLU and max-pooling kinks."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .geometry import PooledMap

STEP = 1e-5
EPS = 1e-8
TOL_SMOOTH = 1e-5
TOL_PIECEWISE = 1e-4


def central_difference(fn: Callable[[], float], x: np.ndarray, step: float = STEP, coords=None):
    """Numeric gradient of ``fn()`` w.r.t. ``x``, perturbing ``x`` in place.

    ``fn`` reads ``x`` by reference. ``coords`` optionally restricts the
    probe to some flat indices (the rest stay 0). Returns ``(grad, bad)``
    where ``bad`` flags coordinates whose evaluations were not finite.
    """
    if x.dtype != np.float64:
        raise TypeError("finite differences need float64 parameters")
    grad = np.zeros_like(x)
    bad = np.zeros(x.shape, dtype=bool)
    flat = x.reshape(-1)
    if not np.shares_memory(flat, x):
        raise ValueError("finite differences need a contiguous parameter array")
    gflat = grad.reshape(-1)
    bflat = bad.reshape(-1)
    for i in (range(flat.size) if coords is None else coords):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn()
        flat[i] = orig - step
        fm = fn()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            bflat[i] = True
            continue
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad, bad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, eps: float = EPS) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), eps)
    return np.abs(analytic - numeric) / denom


@dataclass
class GradEntry:
    name: str
    max_rel_error: float
    tolerance: float
    non_finite: int = 0

    @property
    def passed(self) -> bool:
        return self.non_finite == 0 and self.max_rel_error < self.tolerance


@dataclass
class GradReport:
    op: str
    seed: int
    entries: list[GradEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def lines(self) -> list[str]:
        return [f"{self.op:<24} seed={self.seed:<4} {e.name:<22} max_rel_err={e.max_rel_error:.3e} "
                f"tol={e.tolerance:.0e} {'PASS' if e.passed else 'FAIL'}"
                for e in self.entries]

    def __str__(self) -> str:
        return "\n".join(self.lines())


def check_gradients(op: str, seed: int, loss, params: Mapping[str, np.ndarray],
                    analytic: Mapping[str, np.ndarray], tolerance: float, step: float = STEP,
                    coords: Mapping[str, np.ndarray] | None = None) -> GradReport:
    """Compare ``analytic[name]`` with central differences of the loss w.r.t. ``params[name]``.

    ``loss`` is one callable, or a mapping name -> callable when a cheaper
    closure evaluates the same scalar for that parameter. ``coords[name]``
    limits the comparison to those flat indices.
    """
    report = GradReport(op, seed)
    coords = coords or {}
    for name, x in params.items():
        fn = loss[name] if isinstance(loss, Mapping) else loss
        idx = coords.get(name)
        numeric, bad = central_difference(fn, x, step, idx)
        err = relative_error(np.asarray(analytic[name], dtype=np.float64), numeric)
        err = np.where(bad, 0.0, err)
        if idx is not None:
            err = err.reshape(-1)[idx]
        label = name if idx is None else f"{name}[{len(idx)} of {x.size}]"
        report.entries.append(GradEntry(label, float(err.max()) if err.size else 0.0, tolerance,
                                        int(bad.sum())))
    return report


def relu_margin(pre: np.ndarray) -> float:
    """Smallest |pre-activation|; below 10 * step the ReLU kink is too close."""
    return float(np.abs(pre).min()) if pre.size else np.inf


def pool_margin(source: np.ndarray, pooled: PooledMap) -> float:
    """Smallest gap between the winning value and the runner-up of any bin.

    Bins covering a single position have no runner-up and are skipped.
    """
    R, cs, h, w = pooled.values.shape
    best = np.inf
    for r in range(R):
        for m in range(h):
            for n in range(w):
                y0, y1, x0, x1 = pooled.bounds[r, m, n]
                if (y1 - y0) * (x1 - x0) < 2:
                    continue
                base = (pooled.groups[r, m, n] - 1) * cs
                img = pooled.image_index[r]
                block = source[img, base:base + cs, y0:y1, x0:x1].reshape(cs, -1)
                top2 = np.sort(block, axis=1)[:, -2:]
                best = min(best, float((top2[:, 1] - top2[:, 0]).min()))
    return best


def kinks_clear(step: float = STEP, relu_inputs=(), pools=()) -> bool:
    """True when every ReLU input and max-pool bin is at least 10 * step from a kink."""
    limit = 10.0 * step
    for pre in relu_inputs:
        if relu_margin(pre) < limit:
            return False
    for source, pooled in pools:
        if pool_margin(source, pooled) < limit:
            return False
    return True
