"""Line-shape models: dipole correlation functions and absorbance profiles.

Units are fixed across the package: frequencies in MHz, the conjugate
variable ``tau`` in 1/MHz (microseconds).  The correlation function of a
line is normalised so that ``Phi(0) = 1``; the absorbance scale is carried
by :attr:`LineParams.area`.

The Fourier convention is ``Phi(tau) = int A(nu) exp(+2 pi i nu tau) dnu``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.fft import irfft, next_fast_len
from scipy.special import wofz

MODELS = ("gaussian", "lorentzian", "voigt", "galatry")

SQRT_PI = math.sqrt(math.pi)

#: Correlation magnitude below which the tau-grid is truncated.
TAU_CUTOFF = 1e-12

#: Zero-padding factor of the tau-domain inversion (period = PAD x grid span).
PAD = 8


class ProfileError(ValueError):
    """Invalid line parameters or sampling grid."""


class GridTooCoarseError(ProfileError):
    pass


class NonUniformGridError(ProfileError):
    pass


@dataclass(frozen=True)
class LineParams:
    """Physical description of an isolated absorption line.

    Attributes
    ----------
    nu0 : float
        Line centre (MHz).
    dnu_dop : float
        Doppler half-width at 1/e of maximum (MHz).
    dnu_coll : float
        Collisional (Lorentzian) HWHM (MHz).
    beta_gal : float
        Dicke-narrowing diffusion rate (MHz); 0 disables narrowing.
    area : float
        Integrated absorbance (MHz).
    baseline_level, baseline_slope : float
        Linear baseline ``level + slope * (nu - nu0)``.
    """

    nu0: float = 0.0
    dnu_dop: float = 0.0
    dnu_coll: float = 0.0
    beta_gal: float = 0.0
    area: float = 1.0
    baseline_level: float = 0.0
    baseline_slope: float = 0.0

    def __post_init__(self):
        for name in ("dnu_dop", "dnu_coll", "beta_gal", "area"):
            value = getattr(self, name)
            if not value >= 0.0 or not math.isfinite(value):
                raise ProfileError(f"{name} must be finite and >= 0, got {value!r}")
        if self.dnu_dop == 0.0 and self.dnu_coll == 0.0:
            raise ProfileError("at least one of dnu_dop, dnu_coll must be > 0")

    def replace(self, **changes) -> "LineParams":
        return replace(self, **changes)

    def width_scale(self, model: str = "voigt") -> float:
        """Width that sets the sampling requirement of ``model``."""
        if model == "gaussian":
            return self.dnu_dop
        if model == "lorentzian":
            return self.dnu_coll
        return self.dnu_dop + self.dnu_coll


def check_model(model: str) -> str:
    if model not in MODELS:
        raise ProfileError(f"unknown profile model {model!r}; expected one of {MODELS}")
    return model


def effective_params(p: LineParams, model: str) -> LineParams:
    """Zero the parameters a model ignores (e.g. ``dnu_coll`` for a Gaussian)."""
    check_model(model)
    if model == "gaussian":
        return replace(p, dnu_coll=0.0, beta_gal=0.0)
    if model == "lorentzian":
        return replace(p, dnu_dop=0.0, beta_gal=0.0)
    if model == "voigt":
        return replace(p, beta_gal=0.0)
    return p


# ---------------------------------------------------------------------------
# correlation functions


def _narrowing_factor(x):
    """``(x - 1 + exp(-x)) / x**2`` for ``x >= 0``, stable near 0."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = x < 1e-2
    xs = x[small]
    out[small] = 0.5 - xs / 6 + xs**2 / 24 - xs**3 / 120 + xs**4 / 720 - xs**5 / 5040
    xl = x[~small]
    out[~small] = (xl + np.expm1(-xl)) / xl**2
    return out


def _narrowing_factor_deriv(x):
    """Derivative of :func:`_narrowing_factor`."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = x < 1e-2
    xs = x[small]
    out[small] = -1 / 6 + xs / 12 - xs**2 / 40 + xs**3 / 180 - xs**4 / 1008
    xl = x[~small]
    h = xl + np.expm1(-xl)
    out[~small] = (-np.expm1(-xl) * xl - 2 * h) / xl**3
    return out


def _doppler_exponent(p: LineParams, atau):
    """Real decay exponent ``K(|tau|)`` from the velocity distribution."""
    if p.beta_gal == 0.0:
        return (math.pi * p.dnu_dop * atau) ** 2
    x = 2 * math.pi * p.beta_gal * atau
    return 2 * (math.pi * p.dnu_dop * atau) ** 2 * _narrowing_factor(x)


def voigt_correlation(p: LineParams, tau, origin: float = 0.0):
    """Voigt correlation ``exp[2 pi (i nu0 - dnu_coll) tau - (pi dnu_dop tau)^2]``.

    Negative ``tau`` is filled by Hermitian symmetry.  ``origin`` is
    subtracted from ``nu0`` so phases stay accurate for absolute
    frequencies.
    """
    tau = np.asarray(tau, dtype=float)
    atau = np.abs(tau)
    expo = (
        2j * math.pi * (p.nu0 - origin) * tau
        - 2 * math.pi * p.dnu_coll * atau
        - (math.pi * p.dnu_dop * atau) ** 2
    )
    return np.exp(expo)


def galatry_correlation(p: LineParams, tau, origin: float = 0.0):
    """Soft-collision (Galatry) correlation function.

    The Gaussian decay ``(pi dnu_dop tau)^2`` is replaced by
    ``(dnu_dop / beta)^2 / 2 * (2 pi beta |tau| - 1 + exp(-2 pi beta |tau|))``,
    which tends to it as ``beta_gal -> 0``.
    """
    tau = np.asarray(tau, dtype=float)
    atau = np.abs(tau)
    expo = (
        2j * math.pi * (p.nu0 - origin) * tau
        - 2 * math.pi * p.dnu_coll * atau
        - _doppler_exponent(p, atau)
    )
    return np.exp(expo)


def correlation(p: LineParams, tau, model: str = "voigt", origin: float = 0.0):
    p = effective_params(p, model)
    if model == "galatry":
        return galatry_correlation(p, tau, origin)
    return voigt_correlation(p, tau, origin)


def correlation_derivs(p: LineParams, tau, model: str, names, origin: float = 0.0):
    """Correlation and its derivatives with respect to line parameters.

    Returns ``(phi, {name: dphi})``; ``area`` is not a factor of ``phi``
    (unit area) and is handled by the caller.
    """
    p = effective_params(p, model)
    tau = np.asarray(tau, dtype=float)
    atau = np.abs(tau)
    phi = correlation(p, tau, model, origin)
    out = {}
    for name in names:
        if name == "nu0":
            out[name] = 2j * math.pi * tau * phi
        elif name == "dnu_coll":
            out[name] = -2 * math.pi * atau * phi
        elif name == "dnu_dop":
            if p.dnu_dop == 0.0:
                dk = np.zeros_like(atau)
            else:
                dk = 2 * _doppler_exponent(p, atau) / p.dnu_dop
            out[name] = -dk * phi
        elif name == "beta_gal":
            x = 2 * math.pi * p.beta_gal * atau
            dk = 2 * (math.pi * p.dnu_dop * atau) ** 2 * _narrowing_factor_deriv(x) * 2 * math.pi * atau
            out[name] = -dk * phi
        else:
            raise KeyError(name)
    return phi, out


# ---------------------------------------------------------------------------
# frequency-domain closed forms (unit area)


def _gaussian(x, width, nderiv=0):
    z = x / width
    w = np.exp(-(z**2)) / (SQRT_PI * width)
    if nderiv == 0:
        return w
    # Hermite recursion: d^n/dz^n exp(-z^2) = (-1)^n H_n(z) exp(-z^2)
    h_prev, h = np.ones_like(z), 2 * z
    for n in range(1, nderiv):
        h_prev, h = h, 2 * z * h - 2 * n * h_prev
    return (-1) ** nderiv * h * w / width**nderiv


def _lorentzian(x, gamma, nderiv=0):
    # (1/pi) Im[1/(x - i gamma)] and its derivatives
    base = 1.0 / (x - 1j * gamma)
    return (-1) ** nderiv * math.factorial(nderiv) * np.imag(base ** (nderiv + 1)) / math.pi


def _faddeeva_derivs(z, n):
    """w(z) and its first ``n`` derivatives."""
    ws = [wofz(z)]
    if n >= 1:
        ws.append(-2 * z * ws[0] + 2j / SQRT_PI)
    for k in range(2, n + 1):
        ws.append(-2 * z * ws[k - 1] - 2 * (k - 1) * ws[k - 2])
    return ws


def _voigt(x, width, gamma, nderiv=0):
    z = (x + 1j * gamma) / width
    w = _faddeeva_derivs(z, nderiv)[nderiv]
    return np.real(w) / (SQRT_PI * width ** (nderiv + 1))


def closed_form(p: LineParams, nu, model: str, nderiv: int = 0):
    """Unit-area profile (or its ``nderiv``-th frequency derivative).

    Available for Gaussian, Lorentzian and Voigt; Galatry has no closed
    form and raises :class:`ProfileError`.
    """
    p = effective_params(p, model)
    x = np.asarray(nu, dtype=float) - p.nu0
    if model == "galatry" and p.beta_gal > 0:
        raise ProfileError("Galatry profile has no closed form with beta_gal > 0")
    if p.dnu_coll == 0.0:
        return _gaussian(x, p.dnu_dop, nderiv)
    if p.dnu_dop == 0.0:
        return _lorentzian(x, p.dnu_coll, nderiv)
    return _voigt(x, p.dnu_dop, p.dnu_coll, nderiv)


def closed_form_derivs(p: LineParams, nu, model: str, names):
    """Unit-area closed-form profile and its parameter derivatives."""
    p = effective_params(p, model)
    x = np.asarray(nu, dtype=float) - p.nu0
    out = {}
    if p.dnu_coll == 0.0:
        g = _gaussian(x, p.dnu_dop)
        for name in names:
            if name == "nu0":
                out[name] = g * 2 * x / p.dnu_dop**2
            elif name == "dnu_dop":
                out[name] = g * (2 * x**2 / p.dnu_dop**3 - 1 / p.dnu_dop)
            elif name == "dnu_coll":
                # d/dGamma of the Voigt at Gamma = 0: -(1/pi) d/dx principal value term
                out[name] = _voigt_gamma_deriv(x, p.dnu_dop, 0.0)
            else:
                out[name] = np.zeros_like(x)
        return g, out
    if p.dnu_dop == 0.0:
        d = x**2 + p.dnu_coll**2
        lor = p.dnu_coll / (math.pi * d)
        for name in names:
            if name == "nu0":
                out[name] = 2 * x * p.dnu_coll / (math.pi * d**2)
            elif name == "dnu_coll":
                out[name] = (x**2 - p.dnu_coll**2) / (math.pi * d**2)
            else:
                out[name] = np.zeros_like(x)
        return lor, out
    width, gamma = p.dnu_dop, p.dnu_coll
    z = (x + 1j * gamma) / width
    w, dw = _faddeeva_derivs(z, 1)
    norm = SQRT_PI * width
    val = np.real(w) / norm
    for name in names:
        if name == "nu0":
            out[name] = np.real(-dw / width) / norm
        elif name == "dnu_coll":
            out[name] = np.real(1j * dw / width) / norm
        elif name == "dnu_dop":
            out[name] = np.real(-dw * z / width) / norm - val / width
        else:
            out[name] = np.zeros_like(x)
    return val, out


def _voigt_gamma_deriv(x, width, gamma):
    z = (x + 1j * gamma) / width
    _, dw = _faddeeva_derivs(z, 1)
    return np.real(1j * dw / width) / (SQRT_PI * width)


# ---------------------------------------------------------------------------
# uniform grids and tau-domain inversion


def check_grid(grid, min_width: float | None = None):
    """Validate a strictly increasing uniform grid; return ``(start, step, n)``."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2:
        raise ProfileError("grid must be one-dimensional with at least 2 points")
    steps = np.diff(grid)
    step = (grid[-1] - grid[0]) / (grid.size - 1)
    if not step > 0 or np.any(steps <= 0):
        raise NonUniformGridError("grid must be strictly increasing")
    # absolute grids (THz offsets) carry rounding of order eps * |nu|
    tol = max(1e-9 * step, 8 * np.finfo(float).eps * float(np.max(np.abs(grid))))
    if np.max(np.abs(steps - step)) > tol:
        raise NonUniformGridError("grid spacing is not uniform to 1e-9 relative")
    if min_width is not None and step > min_width / 4:
        raise GridTooCoarseError(
            f"grid step {step:g} MHz exceeds a quarter of the line width {min_width:g} MHz"
        )
    return float(grid[0]), float(step), int(grid.size)


def tau_extent(magnitude, scale: float) -> float:
    """Smallest ``tau`` (doubling search) with ``magnitude(tau) < TAU_CUTOFF``."""
    tau = 1.0 / scale
    for _ in range(200):
        if magnitude(tau) < TAU_CUTOFF:
            return tau
        tau *= 2.0
    raise ProfileError("correlation function does not decay")


def tau_grid(start: float, step: float, n: int, tau_max: float, pad: int = PAD):
    """Plan a one-sided tau grid for inversion onto a uniform frequency grid.

    Returns ``(tau, dtau, nfft, refine)``: the frequency grid is internally
    refined by ``refine`` so that the tau range reaches ``tau_max``.
    """
    refine = max(1, math.ceil(2.0 * step * tau_max))
    nfft = next_fast_len(pad * refine * n, real=True)
    if nfft % 2:
        nfft = next_fast_len(nfft + 1, real=True)
    dtau = refine / (nfft * step)
    tau = np.arange(nfft // 2 + 1) * dtau
    return tau, dtau, nfft, refine


def invert(f_half, dtau: float, nfft: int, refine: int, n: int):
    """Frequency samples of a Hermitian ``f`` given on ``tau >= 0``.

    Computes ``int f(tau) exp(-2 pi i (nu - start) tau) dtau`` on the
    original grid (every ``refine``-th point of the refined grid).
    """
    vals = irfft(np.conj(f_half), n=nfft) * (dtau * nfft)
    return vals[: n * refine : refine]


def absorbance_profile(p: LineParams, grid, model: str = "voigt"):
    """Absorbance of the line on a uniform ``grid`` (baseline excluded).

    Gaussian, Lorentzian and Voigt use closed forms; the Galatry profile is
    obtained by inverting its correlation function on a zero-padded tau
    grid, after subtracting the Lorentzian part analytically.
    """
    check_model(model)
    grid = np.asarray(grid, dtype=float)
    check_grid(grid, p.width_scale(model))
    pe = effective_params(p, model)
    if model != "galatry" or pe.beta_gal == 0.0:
        return p.area * closed_form(pe, grid, model)
    return p.area * _galatry_fourier(pe, grid)


def _galatry_fourier(p: LineParams, grid):
    start, step, n = check_grid(grid)
    tau_max = tau_extent(
        lambda t: abs(galatry_correlation(p, np.array([t]))[0]), p.dnu_dop + p.dnu_coll
    )
    tau, dtau, nfft, refine = tau_grid(start, step, n, tau_max)
    phi = galatry_correlation(p, tau, origin=start)
    if p.dnu_coll > 0:
        phi = phi - voigt_correlation(replace(p, dnu_dop=0.0, beta_gal=0.0), tau, origin=start)
        base = _lorentzian(grid - p.nu0, p.dnu_coll)
    else:
        base = 0.0
    return base + invert(phi, dtau, nfft, refine, n)
