"""Exception hierarchy shared by all modules."""


class ScorewatchError(Exception):
    """Base class for every error raised by the package."""


class DomainError(ScorewatchError, ValueError):
    """Parameter or intermediate value outside the admissible domain."""

    def __init__(self, message, node=None):
        super().__init__(message if node is None else f"{message} (node {node})")
        self.node = node


class NumericError(ScorewatchError, ArithmeticError):
    """A non-finite intermediate value appeared during a sweep."""

    def __init__(self, message, node=None):
        super().__init__(message if node is None else f"{message} (node {node})")
        self.node = node


class SizeError(ScorewatchError, ValueError):
    """A requested dense object exceeds the configured size cap."""


class ConditioningError(ScorewatchError, ArithmeticError):
    """A linear system was singular, indefinite, or did not converge."""

    def __init__(self, message, residual=None, segment=None):
        super().__init__(message)
        self.residual = residual
        self.segment = segment


class ConvergenceError(ScorewatchError, RuntimeError):
    """An iterative optimizer ran out of iterations."""

    def __init__(self, message, best=None, grad_norm=None):
        super().__init__(message)
        self.best = best
        self.grad_norm = grad_norm


class ConfigError(ScorewatchError, ValueError):
    """Invalid configuration of a model, test, or scenario."""


class DataError(ScorewatchError, ValueError):
    """Observations inconsistent with the model."""


class CalibrationError(ScorewatchError, RuntimeError):
    """Threshold computation failed (underflow, too many failed replicates)."""


class DegeneracyError(NumericError):
    """A likelihood normalizer fell below the numeric floor at observation ``k``."""

    def __init__(self, message, k=None):
        super().__init__(message)
        self.k = k
