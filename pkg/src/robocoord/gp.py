"""Gaussian-process regression of the time-trajectory deviation.

Zero prior mean, Matern 3/2 covariance, hyperparameters fitted by maximizing
the log marginal likelihood with a bounded Nelder-Mead search over
log-parameters.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError
from scipy.optimize import minimize

from .errors import DomainError, FittingError, NumericalError

log = logging.getLogger(__name__)

SQRT3 = math.sqrt(3.0)
JITTER = 1e-12
N_RESTARTS = 8
MAX_ITER = 500
# bounds on (log sigma_s2, log sigma_n2, log ell)
LOG_BOUNDS = ((-20.0, 2.0), (-20.0, 2.0), (-3.0, 8.0))


@dataclass(frozen=True)
class Hyperparameters:
    sigma_s2: float
    sigma_n2: float
    ell_s: float

    def __post_init__(self):
        if not (self.sigma_s2 > 0 and self.sigma_n2 >= 0 and self.ell_s > 0):
            raise DomainError(f"invalid hyperparameters {self}")

    @classmethod
    def from_log(cls, x) -> "Hyperparameters":
        return cls(*(float(math.exp(v)) for v in x))

    def to_log(self) -> np.ndarray:
        return np.log([self.sigma_s2, self.sigma_n2, self.ell_s])


@dataclass(frozen=True)
class ObservationSet:
    positions: np.ndarray
    errors: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=float)
        e = np.asarray(self.errors, dtype=float)
        if p.ndim != 1 or p.shape != e.shape or p.size == 0:
            raise DomainError("positions and errors must be equal-length 1-D arrays")
        if np.any(np.diff(p) <= 0):
            raise DomainError("observation positions must be strictly increasing")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(e))):
            raise DomainError("observations must be finite")
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "errors", e)

    def __len__(self):
        return self.positions.size


def kernel(p, p_prime, theta: Hyperparameters):
    """Matern 3/2 covariance between positions (broadcasts)."""
    r = np.abs(np.asarray(p, dtype=float) - np.asarray(p_prime, dtype=float))
    a = SQRT3 * r / theta.ell_s
    k = theta.sigma_s2 * (1.0 + a) * np.exp(-a)
    return float(k) if np.ndim(k) == 0 else k


def _gram(positions, theta):
    return kernel(positions[:, None], positions[None, :], theta)


def _factor(positions, theta):
    A = _gram(positions, theta)
    A[np.diag_indices_from(A)] += theta.sigma_n2 + JITTER
    try:
        return cho_factor(A, lower=True, check_finite=False)
    except LinAlgError as exc:
        raise NumericalError(f"covariance not positive definite for {theta}") from exc


def log_marginal_likelihood(theta: Hyperparameters, obs: ObservationSet) -> float:
    factor = _factor(obs.positions, theta)
    alpha = cho_solve(factor, obs.errors, check_finite=False)
    log_det = 2.0 * np.sum(np.log(np.diag(factor[0])))
    n = len(obs)
    return float(-0.5 * obs.errors @ alpha - 0.5 * log_det - 0.5 * n * math.log(2.0 * math.pi))


def _start_points(obs, rng):
    lo = np.array([b[0] for b in LOG_BOUNDS])
    hi = np.array([b[1] for b in LOG_BOUNDS])
    span = float(obs.positions[-1] - obs.positions[0]) or 1.0
    var = float(np.var(obs.errors)) + float(np.mean(obs.errors)) ** 2
    informed = np.clip(np.log([max(var, 1e-8), max(var * 1e-2, 1e-9), span / 2.0]), lo, hi)
    starts = [informed]
    starts += [rng.uniform(lo, hi) for _ in range(N_RESTARTS - 1)]
    return starts


def fit_hyperparameters(obs: ObservationSet, seed: int = 0) -> Hyperparameters:
    """Maximum-likelihood hyperparameters by multi-start Nelder-Mead.

    The result is the best point evaluated over all restarts, so it never has
    a lower likelihood than any start point.
    """
    if len(obs) < 2:
        raise DomainError("need at least two observations to fit")
    rng = np.random.default_rng(seed)
    best = {"x": None, "f": math.inf}

    def objective(x):
        try:
            f = -log_marginal_likelihood(Hyperparameters.from_log(x), obs)
        except (NumericalError, DomainError):
            return 1e300
        if not math.isfinite(f):
            return 1e300
        # strict improvement keeps the earliest restart on ties
        if f < best["f"]:
            best["x"], best["f"] = np.array(x, dtype=float), f
        return f

    for x0 in _start_points(obs, rng):
        objective(x0)
        minimize(objective, x0, method="Nelder-Mead", bounds=LOG_BOUNDS,
                 options={"maxiter": MAX_ITER, "xatol": 1e-6, "fatol": 1e-10})
    if best["x"] is None:
        raise FittingError("no start point produced a factorizable covariance")
    theta = Hyperparameters.from_log(best["x"])
    log.debug("fitted %s, log-likelihood %.6g", theta, -best["f"])
    return theta


@dataclass(frozen=True)
class GpModel:
    theta: Hyperparameters
    positions: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray

    @classmethod
    def build(cls, obs: ObservationSet, theta: Hyperparameters) -> "GpModel":
        factor = _factor(obs.positions, theta)
        alpha = cho_solve(factor, obs.errors, check_finite=False)
        L = np.tril(factor[0])
        return cls(theta, obs.positions.copy(), L, alpha)

    def posterior(self, p_star):
        """Vectorized posterior mean and variance at ``p_star``."""
        ps = np.atleast_1d(np.asarray(p_star, dtype=float))
        k_star = kernel(self.positions[:, None], ps[None, :], self.theta)
        mu = k_star.T @ self.alpha
        v = cho_solve((self.chol, True), k_star, check_finite=False)
        var = self.theta.sigma_s2 - np.einsum("ij,ij->j", k_star, v)
        return mu, np.clip(var, 0.0, self.theta.sigma_s2)


def fit_model(obs: ObservationSet, seed: int = 0) -> GpModel:
    return GpModel.build(obs, fit_hyperparameters(obs, seed))


def posterior_at(model: GpModel, p_star: float) -> tuple[float, float]:
    mu, var = model.posterior(p_star)
    return float(mu[0]), float(var[0])
