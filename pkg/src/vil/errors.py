"""Exception hierarchy shared by every module."""


class VILError(Exception):
    """Base class for all library errors."""


class InputError(VILError, ValueError):
    """Malformed or out-of-domain input (wrong dimension, negative flow, ...)."""


class EvaluationError(VILError):
    """A user callable returned non-finite values."""


class InfeasibleError(VILError):
    """A polyhedral set is empty."""


class UnboundedError(VILError):
    """A polyhedral set is unbounded."""


class ConvergenceError(VILError):
    """An iterative method hit its iteration limit.

    ``best`` holds the best iterate found and ``residual`` its residual.
    """

    def __init__(self, message, best=None, residual=None):
        super().__init__(message)
        self.best = best
        self.residual = residual


class DegeneracyError(VILError):
    """A KKT or fixed-point system is singular at the current point."""

    def __init__(self, message, active_mask=None, condition=None):
        super().__init__(message)
        self.active_mask = active_mask
        self.condition = condition


class SingularityError(VILError):
    """Newton matrix stayed singular after the full damping escalation."""


class SolverError(VILError):
    """An LP or linear solve failed."""


class SamplingError(VILError):
    """Feasible-point sampling failed."""


class StructureError(VILError):
    """Network structure is inconsistent with its mode annotations."""


class ConnectivityError(VILError):
    """A sink is unreachable from its source."""


class ConfigError(VILError):
    """Experiment configuration failed validation."""
