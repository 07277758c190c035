"""Time the compiled kernels against the numpy fallback on representative sizes.

Usage: python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import time

import numpy as np

from freebound import _pykernels

try:
    from freebound import _ckernels
except ImportError:  # not built; only the fallback is timed
    _ckernels = None


def _best(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    C, P, T, Q, S, nt, M = 2, 33, 400, 16, 16, 65, 33
    coef = rng.standard_normal((C, P, T, Q))
    left = np.sort(rng.integers(0, nt - 1, T)).astype(np.intp)
    h1 = rng.uniform(size=T)
    sidx = rng.integers(0, M, (P, T, Q, S)).astype(np.intp)
    sw = rng.standard_normal((P, T, Q, S))
    yield "scatter_hat_stencil", lambda k: k.scatter_hat_stencil(coef, left, 1 - h1, h1, sidx, sw, nt, M)

    yield "crr_layers N=2000", lambda k: k.crr_layers(100.0, 0.05, 0.2, 1.0, 2000, 200)

    n = 400
    diag = np.full(n, 2.2)
    off = np.full(n, -1.0)
    rhs = rng.uniform(size=n)
    obstacle = np.linspace(1.0, 0.0, n)

    def psor1(k):
        u = obstacle.copy()
        k.psor_1d(u, rhs, obstacle, off, diag, off, 1.5, 1e-10, 5000)
    yield "psor_1d n=400", psor1

    m = 60
    stencil = np.zeros((9, m, m))
    stencil[4] = 4.4
    stencil[[1, 3, 5, 7]] = -1.0
    rhs2 = rng.uniform(size=(m, m))
    obs2 = np.zeros((m, m))

    def psor2(k):
        u = obs2.copy()
        k.psor_2d(u, rhs2, obs2, stencil, 1.5, 1e-10, 2000)
    yield "psor_2d 60x60", psor2


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'numpy [ms]':>12}{'cython [ms]':>13}{'speed-up':>10}")
    for name, fn in cases(rng):
        tp = _best(lambda: fn(_pykernels), args.repeat)
        if _ckernels is None:
            print(f"{name:<22}{tp * 1e3:>12.2f}{'-':>13}{'-':>10}")
            continue
        tc = _best(lambda: fn(_ckernels), args.repeat)
        print(f"{name:<22}{tp * 1e3:>12.2f}{tc * 1e3:>13.2f}{tp / tc:>10.1f}")


if __name__ == "__main__":
    main()
