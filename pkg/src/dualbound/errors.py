"""Exception taxonomy shared across the toolkit."""


class DualBoundError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(DualBoundError, ValueError):
    """Invalid run configuration: bad sizes, schedules, or config keys."""


class ModelError(DualBoundError, ValueError):
    """Invalid model data: dimension mismatches, non-PSD covariances, infeasible targets."""


class EvaluationError(DualBoundError, RuntimeError):
    """Numerical failure while evaluating policies, gradients, or objectives."""


class FeasibilityError(DualBoundError, RuntimeError):
    """An action sequence violates the feasible set beyond tolerance."""
