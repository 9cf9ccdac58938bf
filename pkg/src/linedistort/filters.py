"""Detection-chain filters and frequency-scan protocols."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

BUTTERWORTH_Q = math.sqrt(0.5)


class FilterError(ValueError):
    pass


class PoleError(FilterError, ArithmeticError):
    pass


class UnderdampedFilterWarning(UserWarning):
    pass


@dataclass(frozen=True)
class FilterSpec:
    """Low-pass detection filter ``tau^2 D'' + (tau/Q) D' + D = A``.

    ``order=1`` requires ``q == 0``; ``order=2`` requires ``0 < q <= 1``.
    """

    order: int = 2
    q: float = 0.5
    tau_d: float = 1.0

    def __post_init__(self):
        if self.order not in (1, 2):
            raise FilterError(f"filter order must be 1 or 2, got {self.order!r}")
        if self.order == 1 and self.q != 0:
            raise FilterError("first-order filter requires q = 0")
        if self.order == 2 and not 0 < self.q <= 1:
            raise FilterError(f"second-order filter requires 0 < q <= 1, got {self.q!r}")
        if not self.tau_d > 0 or not math.isfinite(self.tau_d):
            raise FilterError(f"tau_d must be > 0, got {self.tau_d!r}")
        if self.order == 2 and self.q > BUTTERWORTH_Q * (1 + 1e-12):
            warnings.warn(
                f"q = {self.q:g} > sqrt(1/2): underdamped filter rings",
                UnderdampedFilterWarning,
                stacklevel=3,
            )

    @classmethod
    def first_order(cls, tau_d: float) -> "FilterSpec":
        return cls(1, 0.0, tau_d)

    @classmethod
    def cascade(cls, tau_d: float) -> "FilterSpec":
        """Two identical first-order stages (-12 dB/oct lock-in output)."""
        return cls(2, 0.5, tau_d)

    @classmethod
    def butterworth(cls, tau_d: float) -> "FilterSpec":
        return cls(2, BUTTERWORTH_Q, tau_d)

    @property
    def is_cascade(self) -> bool:
        return self.order == 2 and abs(self.q - 0.5) < 1e-12

    @property
    def q_eff(self) -> float:
        """Quality factor entering the gain (0 for first order)."""
        return self.q if self.order == 2 else 0.0

    @property
    def lag_factor(self) -> float:
        """``nu_D / (tau_d * rate)``: ``1/q`` (order 2) or 1 (order 1)."""
        return 1.0 / self.q if self.order == 2 else 1.0

    def with_tau(self, tau_d: float) -> "FilterSpec":
        return FilterSpec(self.order, self.q, tau_d)


@dataclass(frozen=True)
class SweepSpec:
    """Step-by-step sweep: ``n_steps`` frequencies held ``delta_t`` seconds each."""

    delta_nu: float
    delta_t: float
    n_steps: int
    nu_start: float = 0.0

    def __post_init__(self):
        if not self.delta_t > 0:
            raise FilterError("delta_t must be > 0")
        if self.delta_nu == 0 or not math.isfinite(self.delta_nu):
            raise FilterError("delta_nu must be non-zero")
        if int(self.n_steps) != self.n_steps or self.n_steps < 2:
            raise FilterError("n_steps must be an integer >= 2")

    @property
    def rate(self) -> float:
        """Mean sweep rate (MHz/s), signed like ``delta_nu``."""
        return self.delta_nu / self.delta_t

    @property
    def freqs(self) -> np.ndarray:
        """Frequencies in acquisition order."""
        return self.nu_start + self.delta_nu * np.arange(self.n_steps)

    @property
    def nu_stop(self) -> float:
        return self.nu_start + self.delta_nu * (self.n_steps - 1)

    def reversed(self) -> "SweepSpec":
        """Same frequencies swept in the opposite direction."""
        return SweepSpec(-self.delta_nu, self.delta_t, self.n_steps, self.nu_stop)

    @classmethod
    def covering(cls, lo: float, hi: float, delta_nu: float, delta_t: float) -> "SweepSpec":
        """Sweep spanning ``[lo, hi]``; direction from the sign of ``delta_nu``."""
        n = int(math.ceil((hi - lo) / abs(delta_nu))) + 1
        start = lo if delta_nu > 0 else lo + abs(delta_nu) * (n - 1)
        return cls(delta_nu, delta_t, n, start)


def frequency_constant(f: FilterSpec, sweep_rate: float) -> float:
    """Frequency lag ``nu_D``: ``tau_d * rate / q`` (order 2) or ``tau_d * rate``."""
    return f.tau_d * sweep_rate * f.lag_factor


def gain(f: FilterSpec, nu_d: float, tau):
    """Complex gain ``1 / (1 - 2 pi i nu_D tau - (2 pi q nu_D tau)^2)``."""
    return gain_q(f.q_eff, nu_d, tau)


def gain_q(q: float, nu_d: float, tau):
    tau = np.asarray(tau, dtype=float)
    u = 2 * math.pi * nu_d * tau
    den = 1 - 1j * u - (q * u) ** 2
    if np.any(np.abs(den) < 1e-12):
        raise PoleError("filter gain denominator vanishes")
    return 1.0 / den


def cumulant_coefficients(q: float) -> tuple[float, float, float]:
    """Taylor coefficients of ``ln G`` in powers of ``u = 2 pi nu_D tau``.

    ``ln G = i u + c2 u^2 + i c3 u^3 + c4 u^4 + ...`` with
    ``c2 = q^2 - 1/2``, ``c3 = q^2 - 1/3`` and ``c4 = q^4/2 - q^2 + 1/4``.
    """
    s = q * q
    return s - 0.5, s - 1.0 / 3.0, s * s / 2 - s + 0.25
