"""Continuous-sweep forward model of a line recorded through a low-pass filter.

The recorded signal is the inverse Fourier transform of ``G(tau) * Phi(tau)``
where ``G`` is the filter gain.  Inversion is done on a zero-padded one-sided
tau grid; when the line has a Lorentzian component its (undistorted) closed
form is subtracted in the tau domain and added back analytically, which
removes the kink of ``exp(-2 pi Gamma |tau|)`` from the numerical part.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.fft import irfft, next_fast_len, rfft, rfftfreq

from . import profiles
from .filters import FilterSpec, frequency_constant, gain_q
from .profiles import LineParams, ProfileError

LINE_PARAMS = ("nu0", "dnu_dop", "dnu_coll", "beta_gal", "area")
BASELINE_PARAMS = ("baseline_level", "baseline_slope")
PARAM_NAMES = LINE_PARAMS + BASELINE_PARAMS

#: Peak absorbance above which ``exp(-A)`` is considered an overflow risk.
MAX_ABSORBANCE = 50.0


class ForwardError(ValueError):
    pass


class SeriesValidityError(ForwardError):
    pass


@dataclass(frozen=True)
class DistortionModel:
    """Filter seen by the line, with its frequency constant ``nu_d`` (MHz).

    If ``sweep_rate`` (MHz/s) is given, ``nu_d`` must equal
    ``frequency_constant(filter, sweep_rate)``.
    """

    filter: FilterSpec
    nu_d: float
    correction_enabled: bool = True
    sweep_rate: float | None = None

    def __post_init__(self):
        if not math.isfinite(self.nu_d):
            raise ForwardError("nu_d must be finite")
        if self.sweep_rate is not None:
            expected = frequency_constant(self.filter, self.sweep_rate)
            if abs(expected - self.nu_d) > 1e-9 * max(abs(expected), abs(self.nu_d), 1e-300):
                raise ForwardError(
                    f"nu_d={self.nu_d!r} inconsistent with filter and sweep rate "
                    f"(expected {expected!r})"
                )

    @classmethod
    def from_sweep(cls, f: FilterSpec, sweep_rate: float, correction_enabled: bool = True):
        return cls(f, frequency_constant(f, sweep_rate), correction_enabled, sweep_rate)

    @property
    def q(self) -> float:
        return self.filter.q_eff

    def gain(self, tau):
        return gain_q(self.q, self.nu_d, tau)


@dataclass
class Spectrum:
    """Uniformly sampled record ``signal(freqs)`` with acquisition metadata."""

    freqs: np.ndarray
    signal: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.freqs = np.asarray(self.freqs, dtype=float)
        self.signal = np.asarray(self.signal, dtype=float)
        if self.freqs.shape != self.signal.shape or self.freqs.ndim != 1:
            raise ForwardError("freqs and signal must be 1-D arrays of equal length")
        d = np.diff(self.freqs)
        if not (np.all(d > 0) or np.all(d < 0)):
            raise ForwardError("freqs must be strictly monotone")
        profiles.check_grid(self.freqs if d[0] > 0 else self.freqs[::-1])

    @property
    def step(self) -> float:
        return float(self.freqs[1] - self.freqs[0])

    def sorted(self) -> "Spectrum":
        if self.step > 0:
            return self
        return Spectrum(self.freqs[::-1].copy(), self.signal[::-1].copy(), dict(self.meta))


class Cumulants(NamedTuple):
    center_shift: float
    gaussian_width: float
    asymmetry: float
    dnu_coll: float


# ---------------------------------------------------------------------------
# evaluation engine


def _line(p: LineParams, grid, model: str, nu_d: float, q: float, names=()):
    """Filtered unit-area line and its derivatives on a uniform grid.

    ``names`` may contain any of :data:`LINE_PARAMS` except ``area``.
    """
    pe = profiles.effective_params(p, model)
    has_closed = model != "galatry" or pe.beta_gal == 0.0
    if nu_d == 0.0 and has_closed:
        return profiles.closed_form_derivs(pe, grid, model, names)
    start, step, n = profiles.check_grid(grid)
    scale = pe.dnu_dop + pe.dnu_coll
    tau_max = profiles.tau_extent(
        lambda t: abs(profiles.correlation(pe, np.array([t]), model)[0]), scale
    )
    tau, dtau, nfft, refine = profiles.tau_grid(start, step, n, tau_max)
    phi, dphi = profiles.correlation_derivs(pe, tau, model, names, origin=start)
    g = gain_q(q, nu_d, tau) if nu_d != 0.0 else 1.0
    ref = pe.dnu_coll > 0.0
    if ref:
        lor = pe.replace(dnu_dop=0.0, beta_gal=0.0)
        phi_l, dphi_l = profiles.correlation_derivs(
            lor, tau, "lorentzian", [m for m in names if m in ("nu0", "dnu_coll")], origin=start
        )
        base, dbase = profiles.closed_form_derivs(lor, grid, "lorentzian", names)
    val = profiles.invert(g * phi - (phi_l if ref else 0.0), dtau, nfft, refine, n)
    if ref:
        val = val + base
    out = {}
    for name in names:
        f = g * dphi[name]
        if ref and name in dphi_l:
            f = f - dphi_l[name]
        d = profiles.invert(f, dtau, nfft, refine, n)
        if ref:
            d = d + dbase[name]
        out[name] = d
    return val, out


def _filter_samples(values, step: float, nu_d: float, q: float, pad: int = 2):
    """Apply the filter to frequency samples (periodic convolution, zero padded)."""
    values = np.asarray(values, dtype=float)
    n = values.shape[-1]
    nfft = next_fast_len(pad * n, real=True)
    tau = rfftfreq(nfft, d=step)
    # rfft uses exp(-2 pi i nu tau), i.e. the transform at -tau
    g = np.conj(gain_q(q, nu_d, tau))
    return irfft(rfft(values, n=nfft) * g, n=nfft)[..., :n]


def _extended_grid(grid, margin_lo: float, margin_hi: float, refine: int):
    start, step, n = profiles.check_grid(grid)
    fine = step / refine
    n_lo = int(math.ceil(margin_lo / fine))
    n_hi = int(math.ceil(margin_hi / fine))
    total = n_lo + (n - 1) * refine + 1 + n_hi
    ext = start - n_lo * fine + fine * np.arange(total)
    return ext, n_lo


def _thick(p: LineParams, grid, model: str, nu_d: float, q: float, names=()):
    """Filtered transmission ``1 - h*(1 - exp(-A))`` and its derivatives."""
    pe = profiles.effective_params(p, model)
    a_names = [m for m in names if m != "area"]
    if nu_d == 0.0:
        a, da = _line(pe, grid, model, 0.0, q, a_names)
        peak = p.area * np.max(a)
        if peak > MAX_ABSORBANCE:
            raise ForwardError(f"peak absorbance {peak:g} exceeds {MAX_ABSORBANCE}")
        t = np.exp(-p.area * a)
        out = {m: -t * p.area * da[m] for m in a_names}
        if "area" in names:
            out["area"] = -t * a
        return t, out
    start, step, n = profiles.check_grid(grid)
    width = pe.dnu_dop + pe.dnu_coll
    refine = max(1, math.ceil(4 * step / width))
    reach = 30 * abs(nu_d) * max(1.0, 2 * q)
    lo, hi = (reach, 0.0) if nu_d > 0 else (0.0, reach)
    ext, off = _extended_grid(grid, lo + 2 * width, hi + 2 * width, refine)
    fine = step / refine
    a0, da0 = _line(pe, ext, model, 0.0, q, a_names)
    a1, da1 = _line(pe, ext, model, nu_d, q, a_names)
    peak = p.area * np.max(a0)
    if peak > MAX_ABSORBANCE:
        raise ForwardError(f"peak absorbance {peak:g} exceeds {MAX_ABSORBANCE}")
    absorb = p.area * a0
    excess = -np.expm1(-absorb) - absorb
    stack = [excess]
    for m in a_names:
        stack.append(np.expm1(-absorb) * p.area * da0[m])
    if "area" in names:
        stack.append(np.expm1(-absorb) * a0)
    filtered = _filter_samples(np.array(stack), fine, nu_d, q)
    idx = off + refine * np.arange(n)
    t = 1.0 - p.area * a1[idx] - filtered[0][idx]
    out = {}
    for k, m in enumerate(a_names, start=1):
        out[m] = -p.area * da1[m][idx] - filtered[k][idx]
    if "area" in names:
        out["area"] = -a1[idx] - filtered[-1][idx]
    return t, out


def evaluate(
    p: LineParams,
    grid,
    model: str = "voigt",
    nu_d: float = 0.0,
    q: float = 0.0,
    thick: bool = False,
    jac=None,
):
    """Model signal including baseline; optionally its Jacobian.

    Thin samples give ``A_filtered + level + slope * (nu - nu0)``; thick
    samples give ``T_filtered * (1 + level + slope * (nu - nu0))``.
    ``jac`` is a sequence of names from :data:`PARAM_NAMES`; when given, a
    ``(len(grid), len(jac))`` array is returned alongside the signal.
    """
    profiles.check_model(model)
    grid = np.asarray(grid, dtype=float)
    names = list(jac or ())
    line_names = [m for m in names if m in LINE_PARAMS]
    x = grid - p.nu0
    base = p.baseline_level + p.baseline_slope * x
    if thick:
        t, dt = _thick(p, grid, model, nu_d, q, line_names)
        signal = t * (1.0 + base)
        cols = {m: dt[m] * (1.0 + base) for m in line_names}
        if "nu0" in cols:
            cols["nu0"] = cols["nu0"] - t * p.baseline_slope
        cols["baseline_level"] = t
        cols["baseline_slope"] = t * x
    else:
        shape_names = [m for m in line_names if m != "area"]
        a, da = _line(p, grid, model, nu_d, q, shape_names)
        signal = p.area * a + base
        cols = {m: p.area * da[m] for m in shape_names}
        if "area" in line_names:
            cols["area"] = a
        if "nu0" in cols:
            cols["nu0"] = cols["nu0"] - p.baseline_slope
        cols["baseline_level"] = np.ones_like(grid)
        cols["baseline_slope"] = x
    if jac is None:
        return signal
    return signal, np.column_stack([cols[m] for m in names]) if names else np.empty((grid.size, 0))


# ---------------------------------------------------------------------------
# public operations


def _check_inputs(p: LineParams, d: DistortionModel | None, grid, model: str):
    profiles.check_model(model)
    grid = np.asarray(grid, dtype=float)
    profiles.check_grid(grid, p.width_scale(model))
    if d is not None and not isinstance(d, DistortionModel):
        raise ForwardError("distortion must be a DistortionModel")
    return grid


def _meta(p, d, model, thick, kind):
    meta = {"model": model, "thick": thick, "mode": kind, "line": p}
    if d is not None:
        meta.update(filter=d.filter, nu_d=d.nu_d)
    return meta


def distorted_spectrum_continuous(
    p: LineParams, d: DistortionModel | None, grid, model: str = "voigt"
) -> Spectrum:
    """Thin-sample absorbance recorded under a continuous sweep."""
    grid = _check_inputs(p, d, grid, model)
    nu_d, q = (d.nu_d, d.q) if d is not None else (0.0, 0.0)
    signal = evaluate(p, grid, model, nu_d, q)
    return Spectrum(grid, signal, _meta(p, d, model, False, "continuous"))


def thick_sample_transmission(
    p: LineParams, d: DistortionModel | None, grid, model: str = "voigt"
) -> Spectrum:
    """Optically thick transmission ``exp(-A)`` recorded through the filter.

    The baseline multiplies the transmission: ``T * (1 + level + slope (nu - nu0))``.
    """
    grid = _check_inputs(p, d, grid, model)
    nu_d, q = (d.nu_d, d.q) if d is not None else (0.0, 0.0)
    signal = evaluate(p, grid, model, nu_d, q, thick=True)
    return Spectrum(grid, signal, _meta(p, d, model, True, "continuous"))


def perturbative_spectrum(
    p: LineParams, d: DistortionModel, grid, order: int = 3, model: str = "voigt"
) -> Spectrum:
    """Low-order series in ``nu_D`` for the recorded line.

    ``A(nu - nu_D) + (1/2 - Q^2) nu_D^2 A'' - (5/6 - 2 Q^2) nu_D^3 A'''``,
    truncated after ``order`` terms.  Only closed-form models are supported.
    """
    grid = _check_inputs(p, d, grid, model)
    if order not in (1, 2, 3):
        raise ForwardError("order must be 1, 2 or 3")
    pe = profiles.effective_params(p, model)
    if model == "galatry" and pe.beta_gal > 0:
        raise ForwardError("perturbative series needs a closed-form profile")
    nu_d, q = d.nu_d, d.q
    if abs(nu_d) > 0.3 * (pe.dnu_dop + pe.dnu_coll):
        raise SeriesValidityError("|nu_d| exceeds 0.3 line widths; series not valid")
    signal = profiles.closed_form(pe.replace(nu0=pe.nu0 + nu_d), grid, model)
    if order >= 2:
        signal = signal + (0.5 - q * q) * nu_d**2 * profiles.closed_form(pe, grid, model, 2)
    if order >= 3:
        signal = signal - (5 / 6 - 2 * q * q) * nu_d**3 * profiles.closed_form(pe, grid, model, 3)
    signal = p.area * signal + p.baseline_level + p.baseline_slope * (grid - p.nu0)
    meta = _meta(p, d, model, False, "perturbative")
    meta["order"] = order
    return Spectrum(grid, signal, meta)


def voigt_cumulants(p: LineParams, d: DistortionModel | None) -> Cumulants:
    """Low-order effect of the filter on a Voigt line.

    Centre shift ``nu_D``, apparent Gaussian width
    ``sqrt(dnu_dop^2 + (2 - 4 Q^2) nu_D^2)``, the coefficient ``1/3 - Q^2`` of
    the imaginary cubic term, and the unchanged collisional width.
    """
    if d is None:
        return Cumulants(0.0, p.dnu_dop, 0.0, p.dnu_coll)
    q = d.q
    width2 = p.dnu_dop**2 + (2 - 4 * q * q) * d.nu_d**2
    if width2 < 0:
        raise ForwardError("apparent Gaussian width is imaginary for this filter")
    return Cumulants(d.nu_d, math.sqrt(width2), 1 / 3 - q * q, p.dnu_coll)
