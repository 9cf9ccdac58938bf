"""Compare the compiled step-sweep kernel with the pure-numpy fallback.

Run ``python benchmarks/bench_kernels.py``.  The fallback is what the package
uses when ``LINEDISTORT_NUMBA=0`` is set.
"""

import argparse
import time

import numpy as np

from linedistort import _kernels, sweepsim
from linedistort.filters import FilterSpec


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, nargs="+", default=[1_000, 10_000, 100_000])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    # the package flag does not matter here: both paths are built explicitly
    from numba import njit

    compiled = njit(cache=False, nogil=True)(_kernels._propagate_py)
    trans, b, c = sweepsim.transition(FilterSpec.cascade(3.0), 0.0688)
    print(f"{'steps':>8} {'numba [ms]':>12} {'numpy [ms]':>12} {'speed-up':>9}")
    for n in args.steps:
        u = np.exp(-np.linspace(-4, 4, n) ** 2)
        x0 = u[0] * b
        compiled(u[:4], trans, b, c, x0)  # compile outside the timing
        t_nb, y_nb = _best(lambda: compiled(u, trans, b, c, x0), args.repeat)
        t_np, y_np = _best(lambda: _kernels._propagate_np(u, trans, b, c, x0), args.repeat)
        assert np.allclose(y_nb, y_np, rtol=1e-12, atol=1e-15)
        print(f"{n:>8} {1e3 * t_nb:>12.3f} {1e3 * t_np:>12.3f} {t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
