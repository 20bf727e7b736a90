"""Propagation of the time-deviation posterior into speed and position.

With e ~ N(mu, sigma**2) the speed deviation is the quadratic
g = a1' e + a2' e**2 and the position deviation is the cubic
f = a1 e + a2 e**2 + a3 e**3, both with coefficients fixed by the plan at the
nominal arrival time. Their first two moments follow from the raw Gaussian
moments; bounded intervals use an exact normal quantile for e, Chebyshev for
f and Vysochanskii-Petunin for g.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DomainError
from .gp import GpModel
from .trajectory import BoundaryConditions, PolyCoefficients, times_at_positions

VP_MIN_Z = math.sqrt(8.0 / 3.0)


class IntervalFamily(str, Enum):
    EXACT_NORMAL = "exact-normal"
    CHEBYSHEV = "chebyshev"
    VYSOCHANSKII_PETUNIN = "vysochanskii-petunin"


@dataclass(frozen=True)
class TimeDeviationMoments:
    p: float
    mu_e: float
    sigma_e: float

    def __post_init__(self):
        if not self.sigma_e >= 0:
            raise DomainError("sigma_e must be nonnegative")


@dataclass(frozen=True)
class SpeedDeviationMoments:
    mu_g: float
    sigma_g2: float


@dataclass(frozen=True)
class PositionDeviationMoments:
    mu_f: float
    sigma_f2: float


@dataclass(frozen=True)
class ConfidenceInterval:
    lo: float
    hi: float
    level: float
    family: IntervalFamily

    @property
    def width(self) -> float:
        return self.hi - self.lo


@dataclass(frozen=True)
class Levels:
    P_e: float = 0.95
    P_f: float = 0.95
    P_g: float = 0.95


def speed_coefficients(phi: PolyCoefficients, t_nominal):
    tau = np.asarray(t_nominal, dtype=float) - phi.t_origin
    return -2.0 * phi.phi2 - 6.0 * phi.phi3 * tau, -3.0 * phi.phi3


def position_coefficients(phi: PolyCoefficients, t_nominal):
    tau = np.asarray(t_nominal, dtype=float) - phi.t_origin
    a1 = -3.0 * phi.phi3 * tau**2 - 2.0 * phi.phi2 * tau - phi.phi1
    a2 = -3.0 * phi.phi3 * tau - phi.phi2
    return a1, a2, -phi.phi3


def quadratic_moments(a1, a2, mu, sigma):
    """Mean and variance of a1*e + a2*e**2 for e ~ N(mu, sigma**2)."""
    s2 = sigma * sigma
    mean = a1 * mu + a2 * (mu * mu + s2)
    var = s2 * (a1 * a1 + 4.0 * mu * (a1 * a2 + a2 * a2 * mu) + 2.0 * a2 * a2 * s2)
    return mean, np.maximum(var, 0.0)


def cubic_moments(a1, a2, a3, mu, sigma):
    """Mean and variance of a1*e + a2*e**2 + a3*e**3 for e ~ N(mu, sigma**2)."""
    s2 = sigma * sigma
    m2 = mu * mu
    mean = a1 * mu + a3 * (mu * m2 + 3.0 * mu * s2) + a2 * (m2 + s2)
    var = s2 * (a1 * a1 + 4.0 * a1 * a2 * mu + 6.0 * a1 * a3 * m2 + 6.0 * a1 * a3 * s2
                + 4.0 * a2 * a2 * m2 + 2.0 * a2 * a2 * s2 + 12.0 * a2 * a3 * mu * m2
                + 24.0 * a2 * a3 * mu * s2 + 9.0 * a3 * a3 * m2 * m2
                + 36.0 * a3 * a3 * m2 * s2 + 15.0 * a3 * a3 * s2 * s2)
    return mean, np.maximum(var, 0.0)


def speed_deviation_moments(phi: PolyCoefficients, t_nominal: float,
                            e: TimeDeviationMoments) -> SpeedDeviationMoments:
    a1, a2 = speed_coefficients(phi, t_nominal)
    mean, var = quadratic_moments(float(a1), a2, e.mu_e, e.sigma_e)
    return SpeedDeviationMoments(float(mean), float(var))


def position_deviation_moments(phi: PolyCoefficients, t_nominal: float,
                               e: TimeDeviationMoments) -> PositionDeviationMoments:
    a1, a2, a3 = position_coefficients(phi, t_nominal)
    mean, var = cubic_moments(float(a1), float(a2), a3, e.mu_e, e.sigma_e)
    return PositionDeviationMoments(float(mean), float(var))


def _erf_guess(x):
    # Winitzki's closed-form approximation, relative error ~2e-3
    a = 0.147
    ln = math.log1p(-x * x)
    b = 2.0 / (math.pi * a) + 0.5 * ln
    return math.copysign(math.sqrt(math.sqrt(b * b - ln / a) - b), x)


def inverse_erf(x: float) -> float:
    """y with erf(y) = x, Newton-refined from a closed-form start."""
    if not -1.0 < x < 1.0:
        raise DomainError(f"inverse_erf needs |x| < 1, got {x}")
    if x == 0.0:
        return 0.0
    y = _erf_guess(x)
    for _ in range(50):
        step = (math.erf(y) - x) / (2.0 / math.sqrt(math.pi) * math.exp(-y * y))
        y -= step
        if abs(step) <= 1e-15 * max(1.0, abs(y)):
            break
    return y


def _check_level(level):
    if not 0.0 < level < 1.0:
        raise DomainError(f"probability level must lie in (0, 1), got {level}")


def normal_z(P_e: float) -> float:
    _check_level(P_e)
    return math.sqrt(2.0) * inverse_erf(P_e)


def chebyshev_z(P_f: float) -> float:
    _check_level(P_f)
    return 1.0 / math.sqrt(1.0 - P_f)


def vp_z(P_g: float) -> float:
    _check_level(P_g)
    z = math.sqrt(4.0 / (9.0 * (1.0 - P_g)))
    if z <= VP_MIN_Z:
        raise DomainError(f"level {P_g} gives z={z:.4f} outside the Vysochanskii-Petunin regime")
    return z


def interval_time(mu_e, sigma_e, P_e) -> ConfidenceInterval:
    z = normal_z(P_e)
    return ConfidenceInterval(mu_e - z * sigma_e, mu_e + z * sigma_e, P_e, IntervalFamily.EXACT_NORMAL)


def interval_position(mu_f, sigma_f, P_f) -> ConfidenceInterval:
    z = chebyshev_z(P_f)
    return ConfidenceInterval(mu_f - z * sigma_f, mu_f + z * sigma_f, P_f, IntervalFamily.CHEBYSHEV)


def interval_speed(mu_g, sigma_g, P_g) -> ConfidenceInterval:
    z = vp_z(P_g)
    return ConfidenceInterval(mu_g - z * sigma_g, mu_g + z * sigma_g, P_g,
                              IntervalFamily.VYSOCHANSKII_PETUNIN)


@dataclass(frozen=True)
class ConfidenceTube:
    """Deviation intervals on a position grid of one plan.

    ``p`` holds absolute path positions and ``t_nom`` the nominal arrival
    times; E is indexed by position, F and G by nominal time.
    """

    p: np.ndarray
    t_nom: np.ndarray
    e_lo: np.ndarray
    e_hi: np.ndarray
    f_lo: np.ndarray
    f_hi: np.ndarray
    g_lo: np.ndarray
    g_hi: np.ndarray

    def e_at(self, p):
        return np.interp(p, self.p, self.e_lo), np.interp(p, self.p, self.e_hi)

    def f_at(self, t):
        return np.interp(t, self.t_nom, self.f_lo), np.interp(t, self.t_nom, self.f_hi)

    def g_at(self, t):
        return np.interp(t, self.t_nom, self.g_lo), np.interp(t, self.t_nom, self.g_hi)


def position_grid(p0: float, pf: float, step: float) -> np.ndarray:
    if step <= 0:
        raise DomainError("grid step must be positive")
    n = max(int(math.ceil((pf - p0) / step - 1e-9)), 1)
    return np.linspace(p0, pf, n + 1)


def tube_from_posterior(phi, bc, p, mu_e, var_e, levels: Levels) -> ConfidenceTube:
    """Assemble a tube from precomputed posterior moments on grid ``p``."""
    t_nom = times_at_positions(phi, bc, p)
    sigma_e = np.sqrt(var_e)
    b1, b2 = speed_coefficients(phi, t_nom)
    mu_g, var_g = quadratic_moments(b1, b2, mu_e, sigma_e)
    a1, a2, a3 = position_coefficients(phi, t_nom)
    mu_f, var_f = cubic_moments(a1, a2, a3, mu_e, sigma_e)
    ze, zf, zg = normal_z(levels.P_e), chebyshev_z(levels.P_f), vp_z(levels.P_g)
    sf, sg = np.sqrt(var_f), np.sqrt(var_g)
    return ConfidenceTube(p, t_nom, mu_e - ze * sigma_e, mu_e + ze * sigma_e,
                          mu_f - zf * sf, mu_f + zf * sf, mu_g - zg * sg, mu_g + zg * sg)


def build_tube(model: GpModel, phi: PolyCoefficients, bc: BoundaryConditions,
               grid_step: float = 1.0, levels: Levels = Levels()) -> ConfidenceTube:
    """Confidence tube along a plan.

    The deviation process is indexed by distance travelled since the plan
    start, so the posterior is queried at ``p - bc.p0``.
    """
    p = position_grid(bc.p0, bc.pf, grid_step)
    mu_e, var_e = model.posterior(p - bc.p0)
    return tube_from_posterior(phi, bc, p, mu_e, var_e, levels)
