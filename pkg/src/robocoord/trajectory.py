"""Cubic nominal trajectories of a vehicle inside the control zone.

A plan is the unconstrained energy-optimal cubic

    p(t) = phi3*tau**3 + phi2*tau**2 + phi1*tau + phi0,   tau = t - t_origin

fixed by the entry state (position, speed), the exit position and a zero
control input at the exit time. Coefficients are stored relative to the plan
start time ``t_origin`` so that evaluation stays well conditioned late in a
simulation; ``phi0`` carries the absolute path position of the plan start.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, InfeasibleError

EPS_PHI = 1e-12
WINDOW_TOL = 1e-6
POSITION_TOL = 1e-9


@dataclass(frozen=True)
class PolyCoefficients:
    phi3: float
    phi2: float
    phi1: float
    phi0: float
    t_origin: float = 0.0

    def __post_init__(self):
        vals = (self.phi3, self.phi2, self.phi1, self.phi0, self.t_origin)
        if not all(np.isfinite(v) for v in vals):
            raise DomainError(f"non-finite coefficients: {vals}")

    @property
    def degenerate(self) -> bool:
        """True for the constant-acceleration family (no cubic term)."""
        return abs(self.phi3) < EPS_PHI


@dataclass(frozen=True)
class BoundaryConditions:
    t0: float
    v0: float
    tf: float
    pf: float
    p0: float = 0.0

    def __post_init__(self):
        if not (self.tf > self.t0 >= 0.0):
            raise DomainError(f"need tf > t0 >= 0, got t0={self.t0}, tf={self.tf}")
        if not self.pf > self.p0:
            raise DomainError(f"need pf > p0, got p0={self.p0}, pf={self.pf}")
        if not self.v0 > 0.0:
            raise DomainError(f"need v0 > 0, got {self.v0}")

    @property
    def horizon(self) -> float:
        return self.tf - self.t0

    @property
    def distance(self) -> float:
        return self.pf - self.p0


@dataclass(frozen=True)
class MotionLimits:
    u_min: float
    u_max: float
    v_min: float
    v_max: float

    def __post_init__(self):
        if not (self.u_min < 0.0 < self.u_max):
            raise DomainError("need u_min < 0 < u_max")
        if not (0.0 < self.v_min < self.v_max):
            raise DomainError("need 0 < v_min < v_max")


@dataclass(frozen=True)
class CardanoContext:
    """Coefficients of the depressed cubic s**3 + omega0*s + (omega1 + omega2*p) = 0.

    Local time is recovered as ``tau = s + omega3``.
    """

    omega0: float
    omega1: float
    omega2: float
    omega3: float


def solve_coefficients(bc: BoundaryConditions) -> PolyCoefficients:
    """Cubic meeting p(t0)=p0, v(t0)=v0, p(tf)=pf and u(tf)=0."""
    T = bc.horizon
    phi3 = (bc.v0 * T - bc.distance) / (2.0 * T**3)
    if abs(phi3) < EPS_PHI:
        phi3 = 0.0
    phi2 = -3.0 * phi3 * T
    return PolyCoefficients(phi3, phi2, bc.v0, bc.p0, bc.t0)


def eval_state(phi: PolyCoefficients, t):
    """Position, speed and control of the plan at time(s) ``t``."""
    tau = np.asarray(t, dtype=float) - phi.t_origin
    p = ((phi.phi3 * tau + phi.phi2) * tau + phi.phi1) * tau + phi.phi0
    v = (3.0 * phi.phi3 * tau + 2.0 * phi.phi2) * tau + phi.phi1
    u = 6.0 * phi.phi3 * tau + 2.0 * phi.phi2
    if np.ndim(p) == 0:
        return float(p), float(v), float(u)
    return p, v, u


def position(phi: PolyCoefficients, t):
    return eval_state(phi, t)[0]


def cardano_context(phi: PolyCoefficients) -> CardanoContext:
    if phi.degenerate:
        raise DomainError("Cardano reduction needs a nonzero cubic coefficient")
    b = phi.phi2 / phi.phi3
    c = phi.phi1 / phi.phi3
    omega0 = c - b * b / 3.0
    omega1 = (2.0 * b**3 - 9.0 * b * c) / 27.0 + phi.phi0 / phi.phi3
    return CardanoContext(omega0, omega1, -1.0 / phi.phi3, -b / 3.0)


def _local_poly(phi, tau):
    p = ((phi.phi3 * tau + phi.phi2) * tau + phi.phi1) * tau + phi.phi0
    v = (3.0 * phi.phi3 * tau + 2.0 * phi.phi2) * tau + phi.phi1
    return p, v


def _newton_polish(phi, tau, target, T, steps=3):
    for _ in range(steps):
        p, v = _local_poly(phi, tau)
        ok = v > 0
        tau = np.where(ok, tau - (p - target) / np.where(ok, v, 1.0), tau)
        tau = np.clip(tau, 0.0, T)
    return tau


def safeguarded_newton(f, df, target, lo, hi, x0=None, iters=100, xtol=1e-14):
    """Vectorized root of the increasing function f(x) = target on [lo, hi].

    Newton steps that leave the current bracket fall back to bisection, so
    convergence is guaranteed for monotone f.
    """
    lo = np.array(lo, dtype=float, copy=True)
    hi = np.array(hi, dtype=float, copy=True)
    x = 0.5 * (lo + hi) if x0 is None else np.clip(np.asarray(x0, dtype=float), lo, hi)
    for _ in range(iters):
        r = f(x) - target
        lo = np.where(r < 0, x, lo)
        hi = np.where(r > 0, x, hi)
        d = df(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(d > 0, r / d, np.inf)
        x_new = x - step
        outside = ~((x_new > lo) & (x_new < hi)) | ~np.isfinite(x_new)
        x_new = np.where(outside, 0.5 * (lo + hi), x_new)
        done = (r == 0) | (np.abs(x_new - x) <= xtol * np.maximum(1.0, np.abs(x)))
        x = np.where(r == 0, x, x_new)
        if np.all(done):
            break
    return x


def _trig_local(phi, target):
    """The three real roots (local time, stacked) when the discriminant is not positive."""
    ctx = cardano_context(phi)
    q = ctx.omega1 + ctx.omega2 * target
    r = np.sqrt(np.maximum(-ctx.omega0 / 3.0, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.clip(-0.5 * q / r**3, -1.0, 1.0)
    base = np.arccos(c) / 3.0
    return np.stack([2.0 * r * np.cos(base - 2.0 * np.pi * k / 3.0) + ctx.omega3 for k in range(3)])


def _safeguarded_local(phi, target, T, guess=None):
    if guess is None:
        d = phi.phi1 * T + phi.phi2 * T * T + phi.phi3 * T**3
        guess = T * (target - phi.phi0) / d if d > 0 else None
    zeros = np.zeros_like(target)
    return safeguarded_newton(lambda x: _local_poly(phi, x)[0], lambda x: _local_poly(phi, x)[1],
                              target, zeros, zeros + T, guess)


def _cardano_local(phi, target):
    """Raw Cardano root (local time) and a mask of where the formula applies."""
    ctx = cardano_context(phi)
    q = ctx.omega1 + ctx.omega2 * target
    disc = 0.25 * q * q + ctx.omega0**3 / 27.0
    ok = disc > 0.0
    root = np.sqrt(np.where(ok, disc, 0.0))
    s = np.cbrt(-0.5 * q + root) + np.cbrt(-0.5 * q - root)
    return s + ctx.omega3, ok


def times_at_positions(phi: PolyCoefficients, bc: BoundaryConditions, p, method: str = "auto"):
    """Vectorized inverse of the position trajectory on [bc.t0, bc.tf].

    ``method`` is ``"auto"`` (Cardano where its discriminant is positive,
    bisection elsewhere), ``"cardano"`` or ``"bisect"``.
    """
    target = np.atleast_1d(np.asarray(p, dtype=float))
    if np.any(target < bc.p0 - POSITION_TOL) or np.any(target > bc.pf + POSITION_TOL):
        raise DomainError(f"position outside [{bc.p0}, {bc.pf}]")
    target = np.clip(target, bc.p0, bc.pf)
    T = bc.horizon

    if phi.degenerate:
        # phi2*tau**2 + phi1*tau = d, take the positive root in stable form
        d = target - phi.phi0
        tau = 2.0 * d / (phi.phi1 + np.sqrt(np.maximum(phi.phi1**2 + 4.0 * phi.phi2 * d, 0.0)))
        tau = np.clip(tau, 0.0, T)
    elif method == "bisect":
        tau = _safeguarded_local(phi, target, T)
    else:
        tau, ok = _cardano_local(phi, target)
        if method == "cardano" and not np.all(ok):
            raise DomainError("Cardano discriminant is not positive for every position")
        tau = np.where(ok, np.clip(tau, 0.0, T), 0.0)
        tau = _newton_polish(phi, tau, target, T)
        bad = ~ok | (np.abs(_local_poly(phi, tau)[0] - target) > POSITION_TOL)
        if np.any(bad) and method == "auto":
            # three real roots: start from the one whose residual is smallest inside [0, T]
            cands = np.clip(_trig_local(phi, target[bad]), 0.0, T)
            resid = np.abs(_local_poly(phi, cands)[0] - target[bad])
            guess = np.take_along_axis(cands, np.argmin(resid, axis=0)[None], axis=0)[0]
            tau[bad] = _safeguarded_local(phi, target[bad], T, guess)
    tau = _newton_polish(phi, tau, target, T, steps=1)
    return phi.t_origin + tau


def time_at_position(phi: PolyCoefficients, bc: BoundaryConditions, p: float, method: str = "auto") -> float:
    return float(times_at_positions(phi, bc, p, method)[0])


def speed_range(phi: PolyCoefficients, t0: float, tf: float) -> tuple[float, float]:
    """Exact extrema of the speed over [t0, tf]."""
    ts = [t0, tf]
    if not phi.degenerate:
        t_star = phi.t_origin - phi.phi2 / (3.0 * phi.phi3)
        if t0 < t_star < tf:
            ts.append(t_star)
    v = eval_state(phi, np.array(ts))[1]
    return float(v.min()), float(v.max())


def control_range(phi: PolyCoefficients, t0: float, tf: float) -> tuple[float, float]:
    u = eval_state(phi, np.array([t0, tf]))[2]
    return float(u.min()), float(u.max())


def within_limits(phi: PolyCoefficients, t0: float, tf: float, limits: MotionLimits) -> bool:
    v_lo, v_hi = speed_range(phi, t0, tf)
    u_lo, u_hi = control_range(phi, t0, tf)
    return (limits.v_min <= v_lo and v_hi <= limits.v_max
            and limits.u_min <= u_lo and u_hi <= limits.u_max)


def _feasible_horizon(T, t0, v0, pf, p0, limits):
    phi = solve_coefficients(BoundaryConditions(t0, v0, t0 + T, pf, p0))
    return within_limits(phi, t0, t0 + T, limits)


def feasible_exit_window(t0: float, v0: float, pf: float, limits: MotionLimits,
                         p0: float = 0.0, tol: float = WINDOW_TOL) -> tuple[float, float]:
    """Earliest and latest exit times whose cubic respects the motion limits.

    With horizon T and distance D the speed moves monotonically from v0 to
    v(T) = 1.5 D / T - v0 / 2 and the control linearly from
    u0 = 3 D / T**2 - 3 v0 / T to 0. The speed limits and u0 <= u_max each
    bound T on one side. u0 >= u_min fails on a band of T around 2 D / v0
    when 3 v0**2 / (4 D) > -u_min, so the feasible set can split in two.
    The returned window is the component holding the constant-speed time
    D / v0. Ends are pulled inward by at most ``tol`` if rounding leaves
    them infeasible.
    """
    if not (limits.v_min <= v0 <= limits.v_max):
        raise InfeasibleError(f"entry speed {v0} outside [{limits.v_min}, {limits.v_max}]")
    D = pf - p0
    if D <= 0:
        raise DomainError("exit position must lie ahead of the start position")
    T_c = D / v0

    # bounds on x = 1 / T; the larger root of each quadratic is the stable one
    x_hi = (3.0 * v0 + math.sqrt(9.0 * v0 * v0 + 12.0 * D * limits.u_max)) / (6.0 * D)
    T_lo = max(1.5 * D / (limits.v_max + 0.5 * v0), 1.0 / x_hi)
    T_hi = 1.5 * D / (limits.v_min + 0.5 * v0)
    disc = 9.0 * v0 * v0 + 12.0 * D * limits.u_min
    if disc > 0.0:
        T_hi = min(T_hi, 6.0 * D / (3.0 * v0 + math.sqrt(disc)))
    T_lo, T_hi = min(T_lo, T_c), max(T_hi, T_c)

    feasible = lambda T: _feasible_horizon(T, t0, v0, pf, p0, limits)  # noqa: E731
    if not feasible(T_c):
        raise InfeasibleError("constant-speed plan violates the limits")

    def settle(T, toward):
        step = max(abs(T) * 1e-15, 1e-15)
        while not feasible(T):
            if abs(T - toward) <= step or step > tol:
                return toward
            T += step if toward > T else -step
            step *= 2.0
        return T

    return t0 + settle(T_lo, T_c), t0 + settle(T_hi, T_c)
