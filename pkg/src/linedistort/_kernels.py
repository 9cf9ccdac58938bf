"""Hot loops, compiled with numba when available.

Set ``LINEDISTORT_NUMBA=0`` to force the pure-Python/numpy path (useful for
debugging and for the benchmark in ``benchmarks/``).
"""

import os

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    njit = None

USE_NUMBA = njit is not None and os.environ.get("LINEDISTORT_NUMBA", "1") != "0"


def _propagate_py(u, trans, b, c, x0):
    """Sampled output of a piecewise-constant-input LTI filter.

    For each step with input ``u[n]`` the error state ``x - u[n] b`` evolves
    by ``trans``; the output ``c . x`` is recorded at the end of the step.
    """
    n = u.shape[0]
    k = b.shape[0]
    x = x0.copy()
    tmp = np.empty(k)
    out = np.empty(n)
    for i in range(n):
        ui = u[i]
        for r in range(k):
            acc = 0.0
            for s in range(k):
                acc += trans[r, s] * (x[s] - ui * b[s])
            tmp[r] = acc + ui * b[r]
        y = 0.0
        for r in range(k):
            x[r] = tmp[r]
            y += c[r] * tmp[r]
        out[i] = y
    return out


def _propagate_np(u, trans, b, c, x0):
    # pure-numpy fallback: same recursion, vector ops per step
    x = np.array(x0, dtype=float)
    out = np.empty(u.shape[0])
    for i, ui in enumerate(u):
        x = trans @ (x - ui * b) + ui * b
        out[i] = c @ x
    return out


if USE_NUMBA:
    propagate = njit(cache=True, nogil=True)(_propagate_py)
else:
    propagate = _propagate_np
