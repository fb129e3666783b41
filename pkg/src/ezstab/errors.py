"""Exception hierarchy shared by all ezstab modules."""

from __future__ import annotations


class EZError(Exception):
    """Base class for every error raised by ezstab."""


class ParameterError(EZError, ValueError):
    """Invalid or degenerate model/preference parameters."""


class DomainError(EZError, ValueError):
    """A function was evaluated outside its domain.

    The offending values are kept on the instance so callers (notably the
    BSDE solver) can turn them into truncation events.
    """

    def __init__(self, message: str, **values):
        self.values = values
        detail = ", ".join(f"{k}={v!r}" for k, v in values.items())
        super().__init__(f"{message} ({detail})" if detail else message)


class SingularVolatilityError(EZError):
    def __init__(self, t, location, cond):
        self.t = t
        self.location = location
        self.cond = cond
        super().__init__(
            f"volatility matrix singular or ill-conditioned at t={t!r}, "
            f"state={location!r} (condition number {cond:.3g})"
        )


class NonFiniteError(EZError, FloatingPointError):
    def __init__(self, what: str, path: int | None = None, node: int | None = None):
        self.path = path
        self.node = node
        super().__init__(f"non-finite {what} at path={path}, node={node}")


class RegressionError(EZError):
    """Least-squares regression failed (e.g. rank deficiency in strict mode)."""


class GridBoundaryError(EZError):
    """A grid search found its optimum on the boundary of the grid."""


class InadmissibleError(EZError):
    """A consumption plan could not be financed with nonnegative wealth."""

    def __init__(self, message: str, fraction: float):
        self.fraction = fraction
        super().__init__(f"{message} (violating fraction of paths: {fraction:.4f})")


class OptimizerError(EZError):
    def __init__(self, message: str, trace=None):
        self.trace = trace or []
        super().__init__(message)


class ConfigError(EZError):
    """Configuration validation error; raised before any computation."""
