"""Step-by-step frequency sweeps propagated exactly through the filter.

Each frequency ``nu_n`` is held for ``delta_t``; over that interval the
filter input is constant, so the state update is an exact matrix
exponential.  The output is sampled at the end of every step.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from typing import NamedTuple

import numpy as np
from scipy.linalg import expm

from . import _kernels, forward
from .filters import FilterError, FilterSpec, SweepSpec, frequency_constant
from .fit import FitError, FitProblem, fit_spectrum
from .forward import DistortionModel, Spectrum
from .profiles import LineParams

#: Half-span (in Doppler widths) of the simulated Gaussian for a_nu and width scans.
SPAN = 6.0


class WidthPoint(NamedTuple):
    ratio: float
    nu_d_rel: float
    deviation: float


class CenterPoint(NamedTuple):
    ratio: float
    nu_d_rel: float
    shift_rel: float


def transition(f: FilterSpec, dt: float):
    """Exact per-step propagator ``(trans, b, c)`` of the filter.

    The error state ``x - u b`` evolves by ``trans`` over ``dt`` for a
    constant input ``u``; the output is ``c . x``.  First order uses a single
    exponential, ``q = 1/2`` the closed-form cascade of two equal stages and
    any other ``q`` the damped-oscillator matrix exponential.
    """
    tau = f.tau_d
    if f.order == 1:
        a = math.exp(-dt / tau)
        return np.array([[a]]), np.array([1.0]), np.array([1.0])
    if f.q <= 0:
        raise FilterError("second-order filter needs q > 0")
    if f.is_cascade:
        a = math.exp(-dt / tau)
        s = dt / tau
        return np.array([[a, 0.0], [s * a, a]]), np.array([1.0, 1.0]), np.array([0.0, 1.0])
    m = np.array([[0.0, 1.0], [-1.0 / tau**2, -1.0 / (f.q * tau)]])
    trans = expm(m * dt)
    if not np.all(np.isfinite(trans)):
        raise FilterError("non-physical filter: propagator diverges")
    return trans, np.array([1.0, 0.0]), np.array([1.0, 0.0])


def simulate_step_sweep(
    absorbance,
    f: FilterSpec,
    s: SweepSpec,
    init: str = "steady",
    noise_sigma: float = 0.0,
    rng=None,
) -> Spectrum:
    """Record ``absorbance(nu)`` through a step-by-step sweep.

    ``init="steady"`` pre-charges the filter to the input at ``nu_start``;
    ``init="zero"`` starts from rest and holds ``nu_start`` for ``10 tau_d``
    before the sweep.  The returned spectrum is sorted by frequency.
    """
    freqs = s.freqs
    u = np.asarray(absorbance(freqs), dtype=float)
    if u.shape != freqs.shape:
        u = np.array([float(absorbance(v)) for v in freqs])
    trans, b, c = transition(f, s.delta_t)
    if init == "steady":
        x0 = u[0] * b
    elif init == "zero":
        lead, _, _ = transition(f, 10 * f.tau_d)
        x0 = u[0] * b + lead @ (np.zeros_like(b) - u[0] * b)
    else:
        raise ValueError("init must be 'steady' or 'zero'")
    y = _kernels.propagate(u, trans, b, c, x0)
    if noise_sigma > 0:
        rng = np.random.default_rng(rng)
        y = y + rng.normal(0.0, noise_sigma, y.shape)
    meta = {"mode": "step", "filter": f, "sweep": s, "thick": False,
            "nu_d": frequency_constant(f, s.rate)}
    return Spectrum(freqs, y, meta).sorted()


def _unit_gaussian(nu):
    return np.exp(-(nu**2)) / math.sqrt(math.pi)


def _gaussian_fit(spec: Spectrum, nu_d: float):
    guess = LineParams(nu0=nu_d, dnu_dop=1.0, area=1.0)
    free = ("nu0", "dnu_dop", "area", "baseline_level")
    res = fit_spectrum(FitProblem(spec, "gaussian", free=free, initial=guess))
    if not res.converged:
        raise FitError(f"Gaussian fit did not converge: {res.message}")
    return res


def _simulate_gaussian(f: FilterSpec, ratio: float, delta_nu_rel: float, span: float = SPAN):
    """Unit-width Gaussian swept upward with ``tau_d / delta_t = ratio``."""
    if not 0 < delta_nu_rel <= 0.5:
        raise ValueError("delta_nu_rel must be in (0, 0.5]")
    ft = f.with_tau(ratio)  # delta_t = 1 s
    nu_d = frequency_constant(ft, delta_nu_rel)
    sweep = SweepSpec.covering(-span, span + 10 * abs(nu_d), delta_nu_rel, 1.0)
    return simulate_step_sweep(_unit_gaussian, ft, sweep), nu_d


def _continuous_gaussian(f: FilterSpec, nu_d_rel: float, step: float = 0.02, span: float = SPAN):
    grid = np.arange(-span, span + 10 * abs(nu_d_rel) + step / 2, step)
    d = DistortionModel(f, nu_d_rel)
    return forward.distorted_spectrum_continuous(LineParams(dnu_dop=1.0), d, grid, "gaussian")


def default_step(f: FilterSpec, ratio: float, nu_d_max: float = 0.02) -> float:
    """Step (Doppler widths) small enough that ``nu_D <= nu_d_max`` at ``ratio``."""
    return min(1e-3, nu_d_max / (ratio * f.lag_factor))


def extract_av(f: FilterSpec, ratio: float, delta_nu_rel: float | None = None) -> float:
    """Fraction ``a_nu`` of ``nu_D`` seen as a centre shift in a step sweep.

    A Gaussian is swept with step ``delta_nu_rel`` Doppler widths and
    ``tau_d / delta_t = ratio``, then fitted with a Gaussian (centre, width,
    area and baseline level free).  The default step keeps ``nu_D`` below
    0.02 Doppler widths so the higher-order centre terms stay under 1e-4.
    """
    if ratio < 0:
        raise ValueError("ratio must be >= 0")
    if ratio == 0:
        return 0.0
    if math.isinf(ratio):
        return 1.0
    if delta_nu_rel is None:
        delta_nu_rel = default_step(f, ratio)
    spec, nu_d = _simulate_gaussian(f, ratio, delta_nu_rel)
    return _gaussian_fit(spec, nu_d).params.nu0 / nu_d


def width_deviation(f: FilterSpec, delta_nu_rel: float, ratio: float, nu_d_rel=None) -> WidthPoint:
    """Relative Gaussian-width bias of one simulated configuration.

    ``ratio = inf`` uses the continuous-sweep model with ``nu_d_rel`` given
    explicitly.
    """
    if math.isinf(ratio):
        if nu_d_rel is None:
            raise ValueError("continuous regime needs nu_d_rel")
        spec = _continuous_gaussian(f, nu_d_rel, step=min(delta_nu_rel or 0.02, 0.02))
        nu_d = nu_d_rel
    elif ratio == 0:
        return WidthPoint(0.0, 0.0, 0.0)
    else:
        spec, nu_d = _simulate_gaussian(f, ratio, delta_nu_rel)
    if nu_d == 0:
        return WidthPoint(ratio, 0.0, 0.0)
    res = _gaussian_fit(spec, nu_d)
    return WidthPoint(ratio, nu_d, res.params.dnu_dop - 1.0)


def _map(fn, items, threads):
    if threads and threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def width_deviation_scan(
    f: FilterSpec, delta_nu_rel, ratios=None, nu_d_rel_grid=None, threads=None
) -> list[WidthPoint]:
    """Width bias over a set of ``tau_d/delta_t`` ratios or ``nu_D/dnu_dop`` values.

    With ``delta_nu_rel`` fixed, ``nu_D = ratio * delta_nu_rel / q`` (order 2)
    so either list determines the other.  ``delta_nu_rel=None`` selects the
    continuous-sweep model for ``nu_d_rel_grid``.
    """
    if delta_nu_rel is None:
        xs = list(nu_d_rel_grid or [])
        return _map(lambda x: width_deviation(f, 0.02, math.inf, x)._replace(ratio=math.inf), xs,
                    threads)
    points = list(ratios or [])
    if nu_d_rel_grid is not None:
        points += [x / (delta_nu_rel * f.lag_factor) for x in nu_d_rel_grid]
    return _map(lambda r: width_deviation(f, delta_nu_rel, r), points, threads)


def center_deviation_scan(
    f: FilterSpec, delta_nu_rel, ratios=None, nu_d_rel_grid=None, threads=None
) -> list[CenterPoint]:
    """Fitted centre shift ``(nu_fit - nu0)/dnu_dop`` of simulated step sweeps.

    ``delta_nu_rel=None`` gives the continuous-sweep reference curve.
    """

    def one_step(r):
        if r == 0:
            return CenterPoint(0.0, 0.0, 0.0)
        spec, nu_d = _simulate_gaussian(f, r, delta_nu_rel)
        return CenterPoint(r, nu_d, _gaussian_fit(spec, nu_d).params.nu0)

    def one_cont(x):
        spec = _continuous_gaussian(f, x)
        return CenterPoint(math.inf, x, _gaussian_fit(spec, x).params.nu0 if x else 0.0)

    if delta_nu_rel is None:
        return _map(one_cont, list(nu_d_rel_grid or []), threads)
    points = list(ratios or [])
    if nu_d_rel_grid is not None:
        points += [x / (delta_nu_rel * f.lag_factor) for x in nu_d_rel_grid]
    return _map(one_step, points, threads)


def delta_nu_for(f: FilterSpec, ratio: float, nu_d_rel: float) -> float:
    """Step size (in Doppler widths) giving ``nu_d_rel`` at ``ratio``."""
    return nu_d_rel / (ratio * f.lag_factor)


__all__ = [
    "CenterPoint",
    "WidthPoint",
    "center_deviation_scan",
    "default_step",
    "delta_nu_for",
    "extract_av",
    "simulate_step_sweep",
    "transition",
    "width_deviation",
    "width_deviation_scan",
]
