"""Compare the numba kernels with their pure-numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each kernel runs once on both paths to warm up (and JIT-compile), then the
median of ``--repeat`` timed calls is reported. Outputs are checked for
equality before timing.
"""
import argparse
import time

import numpy as np

from gacnet import kernels


def cases(rng):
    pts = rng.normal(size=(2048, 3))
    centers = kernels.fps(pts, 512, 0)
    mask = rng.random((64, 304)) < 0.05                 # 1/4 of a 1216x256 crop
    depth = rng.uniform(1, 80, (256, 1216)) * (rng.random((256, 1216)) < 0.05)
    return {
        "fps 2048->512": lambda nb: kernels.fps(pts, 512, 0, use_numba=nb),
        "ball_query 512x32": lambda nb: kernels.ball_query(pts, centers, 0.4, 32, use_numba=nb),
        "window_knn r=7 k=8 (304x64)": lambda nb: kernels.window_knn(mask, 7, 8, use_numba=nb),
        "block_select f=4 (1216x256)": lambda nb: kernels.block_select(depth, 4, use_numba=nb),
    }


def timed(fn, repeat):
    ts = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t)
    return float(np.median(ts))


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        assert same(fn(True), fn(False)), f"{name}: paths disagree"
        t_nb = timed(lambda: fn(True), args.repeat)
        t_np = timed(lambda: fn(False), args.repeat)
        print(f"{name:34s} {1e3 * t_nb:10.2f} {1e3 * t_np:10.2f} {t_np / t_nb:8.1f}x")


if __name__ == "__main__":
    main()
