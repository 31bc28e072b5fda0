"""Exception hierarchy shared across the package."""


class LpnError(Exception):
    """Base class for all package errors."""


class ConfigError(LpnError, ValueError):
    """Invalid configuration, dimensions or command arguments."""


class NumericalError(LpnError, ArithmeticError):
    """Non-convergence, NaN gradients or diverged simulation."""


class SimulationDiverged(NumericalError):
    pass


class CheckpointError(LpnError, ValueError):
    """Malformed or incompatible checkpoint / schedule file."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{message} (field: {field})")
        self.field = field


class StateError(LpnError, RuntimeError):
    """Operation called in the wrong state (e.g. tracing not enabled)."""
