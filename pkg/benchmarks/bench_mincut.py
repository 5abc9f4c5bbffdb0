#!/usr/bin/env python3
"""Benchmark the compiled minimum-2-cut kernel against the pure-Python one.

Both kernels are imported directly, so a single run times the two
implementations on identical inputs and verifies they return bit-identical
results.  (The package itself picks the compiled kernel at import when
available; set HETPLAN_PURE_PYTHON=1 to force the fallback.)

Usage:
    python3 benchmarks/bench_mincut.py [--sizes 16,32,64,128] [--repeats 5]
"""

import argparse
import random
import statistics
import time

import numpy as np

from hetplan import _mincut_py

try:
    from hetplan import _mincut_c
except ImportError:
    _mincut_c = None


def cluster_like_weights(rng: random.Random, n: int) -> np.ndarray:
    """Block-structured bandwidth matrix shaped like a real cluster: fast
    links inside 8-device nodes, medium between nodes, slow across halves."""
    w = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            same_node = i // 8 == j // 8
            same_half = (i < n // 2) == (j < n // 2)
            if same_node:
                bw = 25e9
            elif same_half:
                bw = 10e9
            else:
                bw = 2.69e9
            w[i, j] = w[j, i] = bw * rng.uniform(0.95, 1.05)
    return w


def time_kernel(kernel, weights: np.ndarray, lexrank: np.ndarray, repeats: int):
    times = []
    result = None
    for _ in range(repeats):
        started = time.perf_counter()
        result = kernel(weights, lexrank)
        times.append(time.perf_counter() - started)
    return statistics.median(times), result


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", default="16,32,64,128",
                        help="comma-separated vertex counts")
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()

    sizes = [int(s) for s in args.sizes.split(",")]
    rng = random.Random(args.seed)

    if _mincut_c is None:
        print("compiled kernel not built; timing pure-Python only")
    header = f"{'n':>5} {'python':>12} {'compiled':>12} {'speedup':>8}   identical"
    print(header)
    print("-" * len(header))
    for n in sizes:
        weights = cluster_like_weights(rng, n)
        lexrank = np.arange(n, dtype=np.int64)
        t_py, r_py = time_kernel(_mincut_py.min_cut_kernel, weights, lexrank,
                                 args.repeats)
        if _mincut_c is None:
            print(f"{n:>5} {t_py * 1e3:>10.2f}ms {'-':>12} {'-':>8}")
            continue
        t_c, r_c = time_kernel(_mincut_c.min_cut_kernel, weights, lexrank,
                               args.repeats)
        same = r_py[0] == r_c[0] and list(r_py[1]) == list(r_c[1])
        print(f"{n:>5} {t_py * 1e3:>10.2f}ms {t_c * 1e3:>10.2f}ms "
              f"{t_py / t_c:>7.1f}x   {same}")
        if not same:
            print(f"  MISMATCH at n={n}: python={r_py[0]!r} compiled={r_c[0]!r}")
            return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
