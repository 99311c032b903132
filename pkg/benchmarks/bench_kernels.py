"""Compiled kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints the best-of-N time per kernel and backend, the speedup, and the
largest difference between the two backends' outputs.
"""
import argparse
import timeit

import numpy as np

from rdslab import _fallback, kernels

try:
    from rdslab import _kernels
except ImportError:          # extension not built
    _kernels = None


def qr_case(steps=20000, d=3, k=2, seed=0):
    rng = np.random.default_rng(seed)
    jacs = rng.normal(size=(steps, d, d))
    Q0, _ = np.linalg.qr(rng.normal(size=(d, k)))
    return np.ascontiguousarray(jacs), np.ascontiguousarray(Q0)


def leaf_case(leaves=40, nodes=2001, samples=200_000, k=2, seed=0):
    rng = np.random.default_rng(seed)
    V = rng.normal(size=(leaves, nodes, k))
    cell = rng.integers(0, nodes - 1, samples).astype(np.int64)
    w = rng.random(samples)
    B = rng.normal(size=(samples, k))
    return V, cell, w, B


def bench(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    print(f"dispatch backend: {kernels.BACKEND}")
    if _kernels is None:
        print("compiled extension not available; nothing to compare")
        return
    jacs, Q0 = qr_case()
    V, cell, w, B = leaf_case()
    cases = {
        "qr_sweep": (lambda m: m.qr_sweep(jacs, Q0, False),
                     lambda a, b: float(np.abs(a[0] - b[0]).max())),
        "nearest_leaf": (lambda m: m.nearest_leaf(V, cell, w, B),
                         lambda a, b: float(np.abs(a[1] - b[1]).max()) + float((a[0] != b[0]).sum())),
    }
    print(f"{'kernel':<14}{'cython s':>11}{'numpy s':>11}{'speedup':>9}{'max diff':>11}")
    for name, (call, diff) in cases.items():
        tc = bench(lambda: call(_kernels), args.repeat)
        tp = bench(lambda: call(_fallback), args.repeat)
        d = diff(call(_kernels), call(_fallback))
        print(f"{name:<14}{tc:>11.4f}{tp:>11.4f}{tp / tc:>9.1f}{d:>11.2e}")


if __name__ == "__main__":
    main()
