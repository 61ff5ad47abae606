"""Time the pooling kernels on both backends at detector-scale sizes.

    python benchmarks/bench_kernels.py [--rois 256] [--repeat 5]

Prints per-call milliseconds and the compiled-over-numpy speedup, after
checking that both backends return identical values and argmax indices.
"""
import argparse
import timeit

import numpy as np

from fsnet import attention as att
from fsnet import kernels
from fsnet.geometry import bin_bounds, project_boxes


def make_inputs(rng, n_rois, cs, size, dtype):
    bank = att.AttentionBank(rng.normal(size=(1, 9 * cs, size, size)).astype(dtype), 9, cs)
    xy = rng.uniform(0, size * 4 * 0.6, (n_rois, 2))
    wh = rng.uniform(16, size * 4 * 0.4, (n_rois, 2))
    boxes = np.concatenate([xy, xy + wh], axis=1)
    return bank, boxes


def kernel_args(bank, boxes, pool, cs):
    pooled = att.selective_roi_pool(bank, boxes, pool, pool, "sub-region", 4)
    bounds = pooled.bounds.reshape(-1, 4)
    base = ((pooled.groups - 1) * cs).reshape(-1)
    return bank.values[0], bounds, base


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rois", type=int, default=256)
    ap.add_argument("--cs", type=int, default=40)
    ap.add_argument("--size", type=int, default=32, help="feature map side (image side / 4)")
    ap.add_argument("--pool", type=int, default=7)
    ap.add_argument("--precision", type=int, choices=(32, 64), default=32)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    dtype = np.float32 if args.precision == 32 else np.float64
    bank, boxes = make_inputs(rng, args.rois, args.cs, args.size, dtype)
    feat, bounds, base = kernel_args(bank, boxes, args.pool, args.cs)
    dout = rng.normal(size=(len(bounds), args.cs)).astype(dtype)

    print(f"bank {bank.values.shape[1:]} {np.dtype(dtype).name}, {args.rois} RoIs, "
          f"{args.pool}x{args.pool} bins, C_s={args.cs}")
    if "cython" not in kernels.BACKENDS:
        print("compiled backend not built; only the numpy fallback is timed")

    reference = None
    timings = {}
    original = kernels.BACKEND
    for name in kernels.BACKENDS:
        kernels.use_backend(name)
        out, arg = kernels.pool_forward(feat, bounds, base, args.cs)
        grad = kernels.pool_backward(dout, arg, feat.size)
        if reference is None:
            reference = (out, arg, grad)
        else:
            assert np.array_equal(out, reference[0]) and np.array_equal(arg, reference[1]), "forward mismatch"
            assert np.array_equal(grad, reference[2]), "backward mismatch"
        cases = {
            "pool_forward": lambda: kernels.pool_forward(feat, bounds, base, args.cs),
            "pool_backward": lambda: kernels.pool_backward(dout, arg, feat.size),
            "selective_roi_pool": lambda: att.selective_roi_pool(bank, boxes, args.pool, args.pool, "sub-region", 4),
        }
        for case, fn in cases.items():
            best = min(timeit.repeat(fn, number=1, repeat=args.repeat))
            timings[(case, name)] = best * 1e3
    kernels.use_backend(original)

    names = list(kernels.BACKENDS)
    header = f"{'operation':<22}" + "".join(f"{n + ' ms':>14}" for n in names)
    if len(names) > 1:
        header += f"{'speedup':>10}"
    print(header)
    for case in ("pool_forward", "pool_backward", "selective_roi_pool"):
        row = f"{case:<22}" + "".join(f"{timings[(case, n)]:>14.3f}" for n in names)
        if len(names) > 1:
            row += f"{timings[(case, 'python')] / timings[(case, 'cython')]:>9.1f}x"
        print(row)
    print("outputs identical across backends")


if __name__ == "__main__":
    main()
