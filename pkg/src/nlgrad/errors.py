"""Exception types shared across the package."""


class NlgradError(Exception):
    """Base class for all package errors."""


class ParameterError(NlgradError, ValueError):
    """Invalid parameter values (kernel, grid, energy, solver, config)."""


class PreconditionError(NlgradError, ValueError):
    """An input field violates a support or shape precondition."""


class SingularityError(NlgradError, ValueError):
    """A singular kernel was evaluated at its singular point."""


class EnergyEvaluationError(NlgradError, ArithmeticError):
    """Stored energy became non-finite at some node."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class ConvergenceError(NlgradError, RuntimeError):
    """An iterative method failed to converge."""
