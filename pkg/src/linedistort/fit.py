"""Least-squares fitting of recorded spectra, with optional filter correction."""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid
from scipy.optimize import least_squares

from . import forward, profiles
from .forward import PARAM_NAMES, DistortionModel, Spectrum
from .profiles import LineParams

FTOL = 1e-12
XTOL = 1e-10
MAX_NFEV = 200

DEFAULT_FREE = {
    "gaussian": ("nu0", "dnu_dop", "area", "baseline_level", "baseline_slope"),
    "lorentzian": ("nu0", "dnu_coll", "area", "baseline_level", "baseline_slope"),
    "voigt": ("nu0", "dnu_dop", "dnu_coll", "area", "baseline_level", "baseline_slope"),
    "galatry": (
        "nu0", "dnu_dop", "dnu_coll", "beta_gal", "area", "baseline_level", "baseline_slope",
    ),
}

_UNUSED = {
    "gaussian": {"dnu_coll", "beta_gal"},
    "lorentzian": {"dnu_dop", "beta_gal"},
    "voigt": {"beta_gal"},
    "galatry": set(),
}

_NONNEGATIVE = {"dnu_dop", "dnu_coll", "beta_gal", "area"}


class FitError(RuntimeError):
    """A fit did not converge where convergence was required."""


class SingularCovarianceWarning(UserWarning):
    pass


@dataclass
class FitProblem:
    """A spectrum, a profile model and the parameters to adjust.

    ``free`` lists parameter names from :data:`forward.PARAM_NAMES`; the
    others keep their ``initial`` values.  ``initial=None`` triggers
    :func:`auto_initial`.  ``thick=None`` takes the flag from the spectrum
    metadata.
    """

    spectrum: Spectrum
    model: str = "voigt"
    distortion: DistortionModel | None = None
    thick: bool | None = None
    free: tuple | None = None
    initial: LineParams | None = None
    max_nfev: int = MAX_NFEV

    def __post_init__(self):
        profiles.check_model(self.model)
        if self.free is None:
            self.free = DEFAULT_FREE[self.model]
        unknown = set(self.free) - set(PARAM_NAMES)
        if unknown:
            raise ValueError(f"unknown parameters {sorted(unknown)}")
        self.free = tuple(n for n in PARAM_NAMES if n in set(self.free))
        bad = set(self.free) & _UNUSED[self.model]
        if bad:
            raise ValueError(f"{self.model} profile does not use {sorted(bad)}")
        if not self.free:
            raise ValueError("at least one parameter must be free")

    @property
    def corrected(self) -> bool:
        return self.distortion is not None and self.distortion.correction_enabled

    def resolved_thick(self) -> bool:
        if self.thick is not None:
            return bool(self.thick)
        return bool(self.spectrum.meta.get("thick", False))


@dataclass
class FitResult:
    params: LineParams
    sigmas: dict
    residuals: np.ndarray
    snr: float
    converged: bool
    n_iter: int
    cost: float = 0.0
    covariance: np.ndarray | None = None
    free: tuple = ()
    message: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.residuals**2)))


def _edge_baseline(freqs, y, frac=0.05):
    k = max(3, int(frac * y.size))
    lo_f, hi_f = np.median(freqs[:k]), np.median(freqs[-k:])
    lo_y, hi_y = np.median(y[:k]), np.median(y[-k:])
    slope = (hi_y - lo_y) / (hi_f - lo_f) if hi_f != lo_f else 0.0
    return lo_y, lo_f, slope


def auto_initial(
    spectrum: Spectrum, model: str, distortion: DistortionModel | None = None, thick: bool = False
) -> LineParams:
    """Starting point from the data alone.

    Baseline from the edge medians, centre from the maximum of the line
    (moved back by ``nu_D`` when the correction is enabled), area from the
    trapezoid integral and width from the truncated second moment.
    """
    s = spectrum.sorted()
    freqs, y = s.freqs, s.signal
    y0, f0, slope = _edge_baseline(freqs, y)
    line = y0 + slope * (freqs - f0)
    if thick:
        a = -np.log(np.clip(y / line, 1e-300, None))
    else:
        a = y - line
    k = int(np.argmax(a))
    peak_at = freqs[k]
    area = float(trapezoid(a, freqs))
    area = max(area, 1e-12)
    core = a > 0.1 * a[k]
    w = np.where(core, a, 0.0)
    mean = np.sum(w * freqs) / np.sum(w)
    var = np.sum(w * (freqs - mean) ** 2) / np.sum(w)
    # a Gaussian truncated at 10% of its peak keeps ~77% of its variance
    hw = math.sqrt(max(var, (freqs[1] - freqs[0]) ** 2) / 0.77 * 2 * math.log(2))
    center = peak_at
    if distortion is not None and distortion.correction_enabled:
        center -= distortion.nu_d
    level_at = y0 + slope * (center - f0)
    level = level_at - 1.0 if thick else level_at
    if thick:
        slope = slope / max(level_at, 1e-12)
    ln2 = math.sqrt(math.log(2))
    if model == "gaussian":
        dop, coll = hw / ln2, 0.0
    elif model == "lorentzian":
        dop, coll = 0.0, hw
    else:
        dop, coll = 0.7 * hw / ln2, 0.3 * hw
    beta = 0.01 * dop if model == "galatry" else 0.0
    return LineParams(center, dop, coll, beta, area, level, slope)


def _scales(p: LineParams, freqs, y):
    width = max(p.dnu_dop + p.dnu_coll, abs(freqs[1] - freqs[0]))
    amp = max(float(np.ptp(y)), 1e-300)
    span = max(float(np.ptp(freqs)), width)
    return {
        "nu0": width,
        "dnu_dop": width,
        "dnu_coll": width,
        "beta_gal": width,
        "area": max(p.area, 1e-300),
        "baseline_level": amp,
        "baseline_slope": amp / span,
    }


def fit_spectrum(problem: FitProblem) -> FitResult:
    """Minimise the squared residuals between the data and the forward model."""
    spec = problem.spectrum.sorted()
    freqs, data = spec.freqs, spec.signal
    thick = problem.resolved_thick()
    d = problem.distortion if problem.corrected else None
    nu_d, q = (d.nu_d, d.q) if d is not None else (0.0, 0.0)
    init = problem.initial or auto_initial(spec, problem.model, problem.distortion, thick)
    init = profiles.effective_params(init, problem.model)
    free = problem.free
    scale = _scales(init, freqs, data)
    s = np.array([scale[n] for n in free])
    origin = np.array([init.nu0 if n == "nu0" else 0.0 for n in free])
    x0 = (np.array([getattr(init, n) for n in free]) - origin) / s
    lower = np.array([0.0 if n in _NONNEGATIVE else -np.inf for n in free])
    x0 = np.maximum(x0, lower)
    amp = scale["baseline_level"]
    cache = {}

    def params_of(x):
        theta = origin + x * s
        vals = dict(zip(free, theta))
        return init.replace(**{k: float(v) for k, v in vals.items()})

    def run(x):
        key = x.tobytes()
        if key not in cache:
            cache.clear()
            p = params_of(x)
            model, jac = forward.evaluate(p, freqs, problem.model, nu_d, q, thick, jac=free)
            cache[key] = ((model - data) / amp, jac * (s / amp))
        return cache[key]

    def fun(x):
        return run(x)[0]

    def jac(x):
        return run(x)[1]

    try:
        res = least_squares(
            fun, x0, jac=jac, bounds=(lower, np.full(lower.shape, np.inf)),
            method="trf", ftol=FTOL, xtol=XTOL, gtol=None, max_nfev=problem.max_nfev,
        )
    except profiles.ProfileError as exc:
        raise FitError(f"forward model failed during fit: {exc}") from exc
    p = params_of(res.x)
    resid_scaled, jac_scaled = run(res.x)
    resid = resid_scaled * amp
    jac_phys = jac_scaled * amp / s
    n, m = resid.size, len(free)
    dof = max(n - m, 1)
    s2 = float(resid @ resid) / dof
    cov, sigmas = _covariance(jac_phys, s2, free)
    model_sig = data + resid
    if thick:
        env = 1.0 + p.baseline_level + p.baseline_slope * (freqs - p.nu0)
        line_amp = float(np.max(np.abs(env - model_sig)))
    else:
        base = p.baseline_level + p.baseline_slope * (freqs - p.nu0)
        line_amp = float(np.max(np.abs(model_sig - base)))
    rms = math.sqrt(float(np.mean(resid**2)))
    snr = line_amp / rms if rms > 0 else math.inf
    return FitResult(
        params=p,
        sigmas=sigmas,
        residuals=resid,
        snr=snr,
        converged=bool(res.status > 0),
        n_iter=int(res.nfev),
        cost=float(resid @ resid) / 2,
        covariance=cov,
        free=free,
        message=str(res.message),
        meta={"model": problem.model, "thick": thick, "corrected": d is not None, "nu_d": nu_d},
    )


def _covariance(jac, s2, free):
    # column-normalised so the rank test is independent of parameter units
    norms = np.linalg.norm(jac, axis=0)
    safe = np.where(norms > 0, norms, 1.0)
    try:
        u, sv, vt = np.linalg.svd(jac / safe, full_matrices=False)
    except np.linalg.LinAlgError:
        sv = np.zeros(len(free))
    if sv.size == 0 or np.any(norms == 0) or sv[-1] <= sv[0] * 1e-7:
        warnings.warn("singular covariance: parameters are degenerate", SingularCovarianceWarning,
                      stacklevel=3)
        cov = np.full((len(free), len(free)), np.nan)
    else:
        inv = (vt.T / sv**2) @ vt
        cov = inv / np.outer(safe, safe) * s2
    sig = np.sqrt(np.clip(np.diag(cov), 0, None)) if np.all(np.isfinite(cov)) else np.full(len(free), np.nan)
    return cov, dict(zip(free, map(float, sig)))


def scan_fit(problems, threads: int | None = None):
    """Fit each problem; results keep input order.

    A problem that raises is reported by its exception instance in place of
    a :class:`FitResult`.
    """
    problems = list(problems)

    def one(pb):
        try:
            return fit_spectrum(pb)
        except Exception as exc:  # collected per element
            return exc

    if threads and threads > 1 and len(problems) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, problems))
    return [one(pb) for pb in problems]
