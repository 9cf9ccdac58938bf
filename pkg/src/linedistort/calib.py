"""Calibration and budget tools built on the forward model and the simulator.

* time-constant recovery from spectra of a line with known centre,
* the step-sweep centre correction ``nu0 = nu_fit - a_nu nu_D``,
* closed-form bias models for uncorrected fits,
* the Doppler-width budget scanner (largest admissible ``nu_D`` or
  ``tau_d/delta_t`` for a target relative width accuracy).
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import minimize_scalar

from . import sweepsim
from .filters import FilterSpec, SweepSpec, frequency_constant
from .fit import FitError, FitProblem, fit_spectrum
from .forward import DistortionModel

#: Table range for the a_nu interpolant, in tau_d/delta_t.
AV_RATIO_MIN = 0.02
AV_RATIO_MAX = 100.0
AV_TABLE_SIZE = 49

RANDOM_ORDER_NOTE = (
    "randomized frequency-ordering acquisition is not modelled; its width bias "
    "is not included in this budget"
)


class CalibrationError(RuntimeError):
    pass


class FlatObjectiveError(CalibrationError):
    """The datasets do not constrain the time constant."""


class ExtrapolationWarning(UserWarning):
    pass


class RangeWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# time-constant calibration


@dataclass
class TauCalibration:
    tau_d: float
    sigma: float
    objective: float
    nu_fit: list
    n_eval: int
    method: str


def _rate_of(sweep) -> float:
    if isinstance(sweep, SweepSpec):
        return sweep.rate
    return float(sweep)


def calibrate_tau(
    datasets,
    f: FilterSpec,
    method: str = "continuous",
    model: str = "voigt",
    free=None,
    initial=None,
    bounds=None,
    thick=None,
    threads: int | None = None,
    xatol: float = 1e-7,
) -> TauCalibration:
    """Time constant minimising ``sum_i (nu_fit_i - nu0_i)^2``.

    Parameters
    ----------
    datasets : list of (Spectrum, float, SweepSpec or float)
        Spectrum, known line centre (MHz) and either the step sweep used to
        record it or the continuous sweep rate (MHz/s, signed).
    f : FilterSpec
        Filter with the nominal ``tau_d``; ``q`` is held fixed.
    method : {"continuous", "step"}
        ``"continuous"`` refits every spectrum with the continuous-sweep
        correction for each trial ``tau_d``.  ``"step"`` fits once without
        correction and applies :func:`step_center_correction`.
    bounds : (float, float), optional
        Search interval; defaults to ``[0.5, 2] * f.tau_d``.

    Returns
    -------
    TauCalibration
        ``sigma`` propagates the per-dataset centre uncertainties through the
        slopes ``d nu_fit_i / d tau_d`` at the minimum.
    """
    datasets = list(datasets)
    if len(datasets) < 2:
        raise ValueError("calibrate_tau needs at least two datasets")
    if method not in ("continuous", "step"):
        raise ValueError("method must be 'continuous' or 'step'")
    lo, hi = bounds if bounds is not None else (0.5 * f.tau_d, 2.0 * f.tau_d)
    if not 0 < lo < hi:
        raise ValueError("bounds must satisfy 0 < lo < hi")

    def fit_one(spec, distortion):
        res = fit_spectrum(FitProblem(spec, model, distortion, thick, free, initial))
        if not res.converged:
            raise FitError(f"fit did not converge: {res.message}")
        return res

    def pmap(fn, items):
        if threads and threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                return list(pool.map(fn, items))
        return [fn(x) for x in items]

    if method == "step":
        for _, _, s in datasets:
            if not isinstance(s, SweepSpec):
                raise ValueError("step method needs a SweepSpec for every dataset")
        raw = pmap(lambda ds: fit_one(ds[0], None), datasets)

        def centres(tau):
            ft = f.with_tau(tau)
            return [
                (step_center_correction(r.params.nu0, ft, s), r.sigmas.get("nu0", math.nan))
                for r, (_, _, s) in zip(raw, datasets)
            ]
    else:

        def centres(tau):
            ft = f.with_tau(tau)

            def one(ds):
                spec, _, s = ds
                r = fit_one(spec, DistortionModel.from_sweep(ft, _rate_of(s)))
                return r.params.nu0, r.sigmas.get("nu0", math.nan)

            return pmap(one, datasets)

    known = np.array([float(nu0) for _, nu0, _ in datasets])
    n_eval = 0

    def objective(tau):
        nonlocal n_eval
        n_eval += 1
        c = np.array([v for v, _ in centres(tau)])
        return float(np.sum((c - known) ** 2))

    probe = [objective(t) for t in (lo, math.sqrt(lo * hi), hi)]
    if max(probe) - min(probe) <= 1e-12 * max(1.0, max(probe)):
        raise FlatObjectiveError("objective does not depend on tau_d; datasets cannot constrain it")
    res = minimize_scalar(objective, bounds=(lo, hi), method="bounded",
                          options={"xatol": xatol * f.tau_d})
    tau = float(res.x)
    h = 1e-3 * tau
    up, dn = centres(tau + h), centres(tau - h)
    g = np.array([(a[0] - b[0]) / (2 * h) for a, b in zip(up, dn)])
    best = centres(tau)
    sig = np.array([s for _, s in best])
    gg = float(g @ g)
    sigma = math.sqrt(float(np.sum(g**2 * sig**2))) / gg if gg > 0 else math.inf
    if min(abs(tau - lo), abs(hi - tau)) < 1e-3 * tau:
        warnings.warn("calibrated tau_d lies at the search bound", RangeWarning, stacklevel=2)
    return TauCalibration(tau, sigma, float(res.fun), [v for v, _ in best], n_eval + 3, method)


# ---------------------------------------------------------------------------
# step-sweep centre correction


@lru_cache(maxsize=16)
def _av_table(order: int, q: float):
    f = FilterSpec(order, q, 1.0)
    ratios = np.geomspace(AV_RATIO_MIN, AV_RATIO_MAX, AV_TABLE_SIZE)
    av = np.array([sweepsim.extract_av(f, r) for r in ratios])
    return ratios, av, PchipInterpolator(np.log(ratios), av)


def av_table(f: FilterSpec):
    """Simulated ``(ratios, a_nu)`` table underlying :func:`a_nu`."""
    ratios, av, _ = _av_table(f.order, float(f.q))
    return ratios.copy(), av.copy()


def a_nu(f: FilterSpec, ratio: float) -> float:
    """Interpolated fraction of ``nu_D`` appearing as a step-sweep centre shift.

    Monotone cubic in ``log(ratio)`` over simulated values; below the table
    the value decays linearly to 0 at ``ratio = 0``.  Beyond ``ratio = 100``
    the continuous-limit form ``1 - c / ratio`` is used with a warning.
    """
    if ratio < 0 or not math.isfinite(ratio):
        raise ValueError("ratio must be finite and >= 0")
    ratios, av, interp = _av_table(f.order, float(f.q))
    if ratio == 0:
        return 0.0
    if ratio < ratios[0]:
        return float(av[0] * ratio / ratios[0])
    if ratio > ratios[-1]:
        warnings.warn(f"tau_d/delta_t = {ratio:g} beyond the a_nu table; extrapolating",
                      ExtrapolationWarning, stacklevel=2)
        return float(1.0 - (1.0 - av[-1]) * ratios[-1] / ratio)
    return float(interp(math.log(ratio)))


def step_center_correction(nu_fit: float, f: FilterSpec, s: SweepSpec) -> float:
    """Line centre ``nu_fit - a_nu nu_D`` for a step sweep.

    ``nu_D`` is signed by the sweep direction, so up and down sweeps are
    corrected in opposite senses.
    """
    nu_d = frequency_constant(f, s.rate)
    return float(nu_fit - a_nu(f, f.tau_d / s.delta_t) * nu_d)


# ---------------------------------------------------------------------------
# closed-form bias models


def empirical_center_model(nu_d: float, dnu_dop: float) -> float:
    """Uncorrected fitted-centre shift ``nu_D [1 - 0.125 (nu_D / dnu_dop)^2]``.

    Valid for ``|nu_D| <= 1.5 dnu_dop``; a :class:`RangeWarning` is issued
    outside.
    """
    if abs(nu_d) > 1.5 * dnu_dop:
        warnings.warn("|nu_d| > 1.5 dnu_dop: outside the empirical model's range",
                      RangeWarning, stacklevel=2)
    x = nu_d / dnu_dop
    return nu_d * (1.0 - 0.125 * x * x)


def lorentz_width_model(dnu_coll: float, nu_d: float, dnu_dop: float) -> float:
    """Apparent Lorentz width ``dnu_coll sqrt(1 + 3 (nu_D / dnu_dop)^2)``.

    Meant for Doppler-dominated lines (``dnu_coll < 0.3 dnu_dop``).
    """
    if dnu_coll >= 0.3 * dnu_dop:
        warnings.warn("dnu_coll >= 0.3 dnu_dop: not a Doppler-dominated line",
                      RangeWarning, stacklevel=2)
    x = nu_d / dnu_dop
    return dnu_coll * math.sqrt(1.0 + 3.0 * x * x)


# ---------------------------------------------------------------------------
# Doppler-width budget


@dataclass
class BudgetPoint:
    delta_nu_rel: float
    ratio: float
    nu_d_rel: float
    deviation: float
    admissible: bool


@dataclass
class BudgetReport:
    """Outcome of :func:`dbt_budget`.

    ``frontier`` maps each step size to ``(ratio_max, nu_d_rel_max)``, the
    largest admissible ``tau_d/delta_t`` and the matching ``nu_D/dnu_dop``
    (``nan`` if no scanned ratio is admissible, ``inf`` if all are).
    """

    target: float
    filter: FilterSpec
    points: list
    frontier: dict
    continuous_threshold: float
    warnings: list = field(default_factory=list)


def _bisect_log(ok, good: float, bad: float, rtol: float = 1e-3) -> float:
    # ok(good) is True, ok(bad) is False; returns the boundary on a log scale
    while abs(math.log(bad / good)) > rtol:
        mid = math.sqrt(good * bad)
        if ok(mid):
            good = mid
        else:
            bad = mid
    return good


def continuous_threshold(f: FilterSpec, target: float, x_lo: float = 1e-5, x_hi: float = 1.0):
    """Largest ``nu_D/dnu_dop`` with continuous-sweep width bias within ``target``."""

    def ok(x):
        return abs(sweepsim.width_deviation(f, 0.02, math.inf, x).deviation) <= target

    if not ok(x_lo):
        return 0.0
    x = x_lo
    while x < x_hi:
        nxt = min(2 * x, x_hi)
        if not ok(nxt):
            return _bisect_log(ok, x, nxt)
        x = nxt
    return math.inf


def dbt_budget(
    f: FilterSpec,
    delta_nu_rel_grid,
    ratio_grid,
    target: float = 1e-6,
    threads: int | None = None,
    refine: bool = True,
) -> BudgetReport:
    """Feasible detection settings for a relative Doppler-width accuracy.

    Every ``(delta_nu_rel, ratio)`` pair is simulated and fitted; the
    frontier per step size is the largest ratio whose width deviation stays
    within ``target``, found by bisection between the last admissible and
    first inadmissible scanned ratios.  Only the fitted Gaussian width enters
    the criterion.
    """
    if not target > 0:
        raise ValueError("target must be > 0")
    deltas = [float(d) for d in delta_nu_rel_grid]
    ratios = sorted(float(r) for r in ratio_grid)
    if any(r <= 0 for r in ratios):
        raise ValueError("ratios must be > 0")
    grid = [(d, r) for d in deltas for r in ratios]

    def one(dr):
        d, r = dr
        w = sweepsim.width_deviation(f, d, r)
        return BudgetPoint(d, r, w.nu_d_rel, w.deviation, abs(w.deviation) <= target)

    if threads and threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            points = list(pool.map(one, grid))
    else:
        points = [one(x) for x in grid]

    frontier = {}
    for d in deltas:
        row = [pt for pt in points if pt.delta_nu_rel == d]
        flags = [pt.admissible for pt in row]
        if not flags[0]:
            r_max = math.nan
        elif all(flags):
            r_max = math.inf
        else:
            k = flags.index(False)
            r_max = row[k - 1].ratio
            if refine:

                def ok(r, d=d):
                    return abs(sweepsim.width_deviation(f, d, r).deviation) <= target

                r_max = _bisect_log(ok, r_max, row[k].ratio)
        nu_max = r_max * d * f.lag_factor if math.isfinite(r_max) else r_max
        frontier[d] = (r_max, nu_max)
    return BudgetReport(target, f, points, frontier, continuous_threshold(f, target),
                        [RANDOM_ORDER_NOTE])


__all__ = [
    "BudgetPoint",
    "BudgetReport",
    "CalibrationError",
    "ExtrapolationWarning",
    "FlatObjectiveError",
    "RangeWarning",
    "TauCalibration",
    "a_nu",
    "av_table",
    "calibrate_tau",
    "continuous_threshold",
    "dbt_budget",
    "empirical_center_model",
    "lorentz_width_model",
    "step_center_correction",
]
