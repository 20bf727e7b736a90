"""Exception types raised by robocoord."""


class RobocoordError(Exception):
    """Base class for all package errors."""


class DomainError(RobocoordError, ValueError):
    """An argument lies outside the domain of the operation."""


class InfeasibleError(RobocoordError):
    """No exit time satisfies the motion limits."""


class FittingError(RobocoordError):
    """Gaussian-process hyperparameter fitting failed for every start."""


class NumericalError(RobocoordError):
    """A covariance matrix could not be factorized."""


class ConfigError(RobocoordError):
    """Invalid run configuration; ``problems`` lists every violation."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
