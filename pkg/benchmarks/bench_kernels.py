#!/usr/bin/env python3
"""Compare the compiled and pure-Python pooling kernels.

Times the depthwise strided 3-D convolution (the engine's hot kernel) on
representative shapes, checks that both backends produce bit-identical
forward results, and reports the speedup.

Run: python3 benchmarks/bench_kernels.py
"""

import time

import numpy as np

from memvit._kernels import get_backend

SHAPES = [
    # (extents, channels, kernel, stride) -- attention pooling and compression
    ((8, 56, 56), 96, (3, 3, 3), (1, 8, 8)),
    ((8, 28, 28), 192, (3, 3, 3), (1, 4, 4)),
    ((8, 14, 14), 384, (3, 3, 3), (1, 2, 2)),
    ((8, 8, 8), 384, (4, 2, 2), (4, 2, 2)),  # memory compression
]


def run(backend, x, w, b, stride, pad, repeats):
    fwd = backend.depthwise_conv3d_fwd
    best = float("inf")
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fwd(x, w, b, stride, pad)
        best = min(best, time.perf_counter() - t0)
    return out, best


def main():
    py = get_backend("python")
    try:
        compiled = get_backend("compiled")
    except RuntimeError:
        print("compiled backend unavailable; showing python timings only")
        compiled = None

    rng = np.random.default_rng(0)
    print(f"{'shape':>28} {'python':>10} {'compiled':>10} {'speedup':>8}  identical")
    for extents, c, kernel, stride in SHAPES:
        x = rng.standard_normal((*extents, c))
        w = rng.standard_normal((*kernel, c))
        b = rng.standard_normal(c)
        pad = tuple((k // 2, k // 2) for k in kernel) if kernel != stride else (
            (0, 0), (0, 0), (0, 0))
        y_py, t_py = run(py, x, w, b, stride, pad, repeats=3)
        label = f"{extents}x{c} k{kernel}"
        if compiled is None:
            print(f"{label:>28} {t_py * 1e3:>9.2f}ms {'-':>10} {'-':>8}")
            continue
        y_c, t_c = run(compiled, x, w, b, stride, pad, repeats=3)
        same = np.array_equal(y_py, y_c)
        print(
            f"{label:>28} {t_py * 1e3:>9.2f}ms {t_c * 1e3:>8.2f}ms "
            f"{t_py / t_c:>7.1f}x  {same}"
        )
        if not same:
            raise SystemExit("backends disagree bitwise")


if __name__ == "__main__":
    main()
