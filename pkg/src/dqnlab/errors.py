"""Exception hierarchy shared by every module."""


class DqnLabError(Exception):
    """Base class for all package errors."""


class InputError(DqnLabError, ValueError):
    """Bad argument: out-of-range index, dimension mismatch, bad time."""


class ValidationError(DqnLabError, ValueError):
    """A data object (MDP, config, kernel) violates its invariants."""


class PreconditionError(DqnLabError, RuntimeError):
    """An operation was called in a state where it cannot run."""


class NumericalError(DqnLabError, ArithmeticError):
    """Non-finite values or a tolerance that could not be met."""


class ConvergenceError(NumericalError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


class DivergenceError(NumericalError):
    """Iterates left the stability region; carries the offending step."""

    def __init__(self, message, step):
        super().__init__(f"{message} at step {step}")
        self.step = step
