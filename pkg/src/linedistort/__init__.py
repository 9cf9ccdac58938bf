"""Line-shape distortion by detection filters in swept-laser absorption spectroscopy.

Forward models of filtered absorption lines (continuous and step-by-step
sweeps), least-squares fitting with an exact filter correction, and the
calibration and budget tools built on them.
"""

from .filters import FilterSpec, SweepSpec, frequency_constant, gain
from .fit import FitProblem, FitResult, fit_spectrum, scan_fit
from .forward import (
    DistortionModel,
    Spectrum,
    distorted_spectrum_continuous,
    perturbative_spectrum,
    thick_sample_transmission,
    voigt_cumulants,
)
from .profiles import LineParams, absorbance_profile, correlation
from .sweepsim import extract_av, simulate_step_sweep, width_deviation_scan

__version__ = "0.1.0"

__all__ = [
    "DistortionModel",
    "FilterSpec",
    "FitProblem",
    "FitResult",
    "LineParams",
    "Spectrum",
    "SweepSpec",
    "absorbance_profile",
    "correlation",
    "distorted_spectrum_continuous",
    "extract_av",
    "fit_spectrum",
    "frequency_constant",
    "gain",
    "perturbative_spectrum",
    "scan_fit",
    "simulate_step_sweep",
    "thick_sample_transmission",
    "voigt_cumulants",
    "width_deviation_scan",
]
