"""Compiled vs numpy kernels on the design hot paths.

Run with ``python3 benchmarks/bench_kernels.py [--n N] [--repeat R]``.
"""
import argparse
import timeit

import numpy as np

from fddesign import _kernels_py, kernels


def inputs(n: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    g1, g2, eg2 = rng.exponential(size=(3, n))
    c1, c2, ec2 = rng.uniform(0.1, 2.0, size=(3, n))
    w = rng.uniform(0.5, 2.0, n)
    return g1, g2, c1, c2, eg2, ec2, w


def bench(fn, repeat: int) -> float:
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, nargs="+", default=[1_000, 10_000, 100_000])
    ap.add_argument("--repeat", type=int, default=7)
    args = ap.parse_args(argv)
    compiled = kernels.compiled_backend
    if compiled is None:
        print("compiled extension unavailable; only the numpy backend is timed")
    print(f"{'kernel':<16}{'n':>9}{'numpy ms':>12}{'cython ms':>12}{'speedup':>9}")
    for n in args.n:
        g1, g2, c1, c2, eg2, ec2, w = inputs(n)
        rng = np.random.default_rng(1)
        m = min(n, 20_000)
        base, mean_M, pool = rng.uniform(0, 3, m), rng.normal(size=(m, 3)), rng.normal(size=(256, 3))
        cases = {
            "closed_form": lambda b: b.closed_form(g1, g2, c1, c2, eg2, ec2, 2.0, 1e-3),
            "totals": lambda b: b.totals(g1, g2, c1, c2, eg2, ec2, w, 2.0, 1e-3),
            "cond_norm_mean": lambda b: b.cond_norm_mean(base, mean_M, pool),
        }
        for name, call in cases.items():
            rows = m if name == "cond_norm_mean" else n
            t_py = bench(lambda: call(_kernels_py), args.repeat) * 1e3
            if compiled is None:
                print(f"{name:<16}{rows:>9}{t_py:>12.3f}{'-':>12}{'-':>9}")
                continue
            t_cy = bench(lambda: call(compiled), args.repeat) * 1e3
            print(f"{name:<16}{rows:>9}{t_py:>12.3f}{t_cy:>12.3f}{t_py / t_cy:>8.1f}x")


if __name__ == "__main__":
    main()
