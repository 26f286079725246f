#!/usr/bin/env python3
"""Timing comparison of the numba and pure-numpy kernel builds.

Covers the three hot paths: exact squared EDT, nearest-point squared
distances, and the conv2d forward/backward pair.  numba functions are
warmed up (compiled) before timing so the comparison reflects steady
state.

    python3 benchmarks/bench_kernels.py [--sizes 32,64,128] [--repeats 5]
"""

import argparse
import time

import numpy as np

from falconseg import backend
from falconseg.geometry.kernels import edt_squared, min_sq_dists
from falconseg.nn import ops


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_edt(size, repeats, rng):
    mask = (rng.random((size, size)) < 0.3).astype(np.uint8)
    mask[size // 2, size // 2] = 1
    return {
        name: _time(lambda flag=flag: edt_squared(mask, backend_numba=flag), repeats)
        for name, flag in (("numba", True), ("numpy", False))
    }


def bench_min_dists(n_points, repeats, rng):
    u = rng.integers(0, 256, size=(n_points, 2)).astype(np.float64)
    v = rng.integers(0, 256, size=(n_points, 2)).astype(np.float64)
    return {
        name: _time(lambda flag=flag: min_sq_dists(u, v, backend_numba=flag), repeats)
        for name, flag in (("numba", True), ("numpy", False))
    }


def bench_conv(size, repeats, rng):
    x = rng.standard_normal((4, 8, size, size))
    w = rng.standard_normal((16, 8, 3, 3))
    b = rng.standard_normal(16)
    out = {}
    for name in ("numba", "numpy"):
        backend.set_backend(name)
        y, cache = ops.conv2d_forward(x, w, b, stride=1, pad=1)
        dy = rng.standard_normal(y.shape)

        def run():
            _, c = ops.conv2d_forward(x, w, b, stride=1, pad=1)
            ops.conv2d_backward(dy, c)

        out[name] = _time(run, repeats)
    backend.set_backend(None)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="32,64,128",
                    help="comma-separated square grid sizes")
    ap.add_argument("--repeats", type=int, default=5,
                    help="timing repeats; the best run is reported")
    args = ap.parse_args()
    sizes = [int(s) for s in args.sizes.split(",")]

    if not backend.numba_available():
        print("numba not importable; nothing to compare")
        return

    rng = np.random.default_rng(0)
    # first calls compile the numba builds; keep them out of the timings
    edt_squared((rng.random((8, 8)) < 0.5).astype(np.uint8), backend_numba=True)
    min_sq_dists(np.ones((2, 2)), np.ones((2, 2)), backend_numba=True)
    backend.set_backend("numba")
    ops.conv2d_backward(*(
        lambda y_c: (rng.standard_normal(y_c[0].shape), y_c[1])
    )(ops.conv2d_forward(rng.standard_normal((1, 2, 8, 8)),
                         rng.standard_normal((2, 2, 3, 3)),
                         rng.standard_normal(2), stride=1, pad=1)))
    backend.set_backend(None)

    print(f"{'kernel':<22} {'numba (ms)':>12} {'numpy (ms)':>12} {'speedup':>9}")
    print("-" * 58)
    for size in sizes:
        rows = [
            (f"edt {size}x{size}", bench_edt(size, args.repeats, rng)),
            (f"min_dists n={4 * size}", bench_min_dists(4 * size, args.repeats, rng)),
            (f"conv2d {size}x{size}", bench_conv(size, args.repeats, rng)),
        ]
        for label, r in rows:
            ratio = r["numpy"] / r["numba"] if r["numba"] > 0 else float("inf")
            print(f"{label:<22} {r['numba'] * 1e3:>12.3f} "
                  f"{r['numpy'] * 1e3:>12.3f} {ratio:>8.1f}x")


if __name__ == "__main__":
    main()
