"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--points 1024] [--repeat 5]

Both paths are called directly, so the env flag does not matter here. The
numba path is warmed up once before timing to keep compilation out of it.
"""

import argparse
import time

import numpy as np

from xmcl import kernels as K


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(n, rng):
    xyz = rng.uniform(-10, 10, (n, 3))
    centers = xyz[: n // 4]
    r2 = 2.0 ** 2
    rows = rng.integers(0, 32, n)
    cols = rng.integers(0, 64, n)
    depth = rng.uniform(1, 20, n)
    valid = np.ones(n, dtype=np.bool_)
    idx = rng.integers(0, n // 4, n * 16)
    vals = rng.standard_normal((n * 16, 32))
    return {
        "fps": (K._fps_numba, K._fps_numpy, (xyz, n // 4, 0)),
        "ball_query": (K._ball_query_numba, K._ball_query_numpy, (centers, xyz, r2, 16)),
        "knn": (K._knn_numba, K._knn_numpy, (xyz, centers, 3)),
        "zbuffer": (K._zbuffer_numba, K._zbuffer_numpy, (rows, cols, depth, valid, 32, 64)),
        "scatter_add_rows": (K._scatter_rows_numba, K._scatter_rows_numpy, (idx, vals, n // 4)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=1024)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not K.HAS_NUMBA:
        print("numba unavailable or disabled: the 'numba' column times the same code uncompiled")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, (fast, slow, a) in cases(args.points, rng).items():
        fast(*a)
        tf = best_of(lambda: fast(*a), args.repeat)
        ts = best_of(lambda: slow(*a), args.repeat)
        print(f"{name:<18}{tf * 1e3:>10.3f}{ts * 1e3:>10.3f}{ts / tf:>9.1f}")


if __name__ == "__main__":
    main()
