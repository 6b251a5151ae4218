#!/usr/bin/env python3
"""Compare the compiled Vandermonde kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--points 20000] [--repeat 20]

Numbers are the best of ``--repeat`` single calls, in milliseconds.
"""
import argparse
import timeit

import numpy as np

from stvem import _core
from stvem._core import fallback
from stvem.polybasis import multi_indices


def bench(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--points", type=int, default=20000)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"compiled backend available: {_core.BACKEND == 'cython'}")
    print(f"{'case':<22}{'numpy [ms]':>12}{'cython [ms]':>13}{'speedup':>9}")
    for nvars, degree in ((2, 2), (2, 5), (3, 3), (3, 5)):
        pts = rng.uniform(-0.5, 0.5, (args.points, nvars))
        exps = np.ascontiguousarray(multi_indices(degree, nvars), dtype=np.int_)
        t_np = bench(lambda: fallback.vandermonde(pts, exps), args.repeat)
        line = f"V  d={nvars} p={degree}".ljust(22) + f"{1e3 * t_np:12.3f}"
        if _core.BACKEND == "cython":
            t_cy = bench(lambda: _core.vandermonde(pts, exps), args.repeat)
            assert np.allclose(_core.vandermonde(pts, exps), fallback.vandermonde(pts, exps))
            line += f"{1e3 * t_cy:13.3f}{t_np / t_cy:9.2f}"
        print(line)
        t_np = bench(lambda: fallback.vandermonde_deriv(pts, exps, 0), args.repeat)
        line = f"dV d={nvars} p={degree}".ljust(22) + f"{1e3 * t_np:12.3f}"
        if _core.BACKEND == "cython":
            t_cy = bench(lambda: _core.vandermonde_deriv(pts, exps, 0), args.repeat)
            line += f"{1e3 * t_cy:13.3f}{t_np / t_cy:9.2f}"
        print(line)


if __name__ == "__main__":
    main()
