"""Compare the compiled kernel backend against the pure-numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--points 4096] [--repeats 20]
"""

import argparse
import time

import numpy as np

from taxposed.kernels import _fallback

try:
    from taxposed.kernels import _native
except ImportError:
    _native = None


def bench(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--points", type=int, default=4096)
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    pts64 = rng.normal(size=(args.points, 3))
    pts32 = pts64.astype(np.float32)
    z = rng.normal(size=3)
    n_sample = args.points // 2

    backends = [("python", _fallback)]
    if _native is not None:
        backends.append(("native", _native))
    else:
        print("native backend not built; showing fallback only")

    rows = []
    for name, mod in backends:
        rows.append(
            (
                f"distance_field f64 ({args.points} pts)",
                name,
                bench(lambda: mod.distance_field(pts64, z), args.repeats),
            )
        )
        rows.append(
            (
                f"distance_field f32 ({args.points} pts)",
                name,
                bench(lambda: mod.distance_field(pts32, z.astype(np.float32)), args.repeats),
            )
        )
        rows.append(
            (
                f"farthest_point_indices ({args.points} -> {n_sample})",
                name,
                bench(lambda: mod.farthest_point_indices(pts64, n_sample, 0), args.repeats),
            )
        )

    width = max(len(r[0]) for r in rows)
    print(f"{'kernel':<{width}}  backend  best time")
    for kernel, name, t in rows:
        print(f"{kernel:<{width}}  {name:<7}  {t * 1e3:9.3f} ms")

    if _native is not None:
        # Sanity: both backends agree on the same inputs.
        np.testing.assert_array_equal(
            _native.distance_field(pts32, z.astype(np.float32)),
            _fallback.distance_field(pts32, z.astype(np.float32)),
        )
        np.testing.assert_array_equal(
            _native.farthest_point_indices(pts64, n_sample, 0),
            _fallback.farthest_point_indices(pts64, n_sample, 0),
        )
        print("parity check: backends agree")


if __name__ == "__main__":
    main()
