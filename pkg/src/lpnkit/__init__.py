"""Smooth imitation policies: Linear Policy Nets, action-Jacobian penalties and
the tooling to train, measure and export them."""

from .errors import (CheckpointError, ConfigError, LpnError, NumericalError,
                     SimulationDiverged, StateError)

__version__ = "0.1.0"

__all__ = ["CheckpointError", "ConfigError", "LpnError", "NumericalError",
           "SimulationDiverged", "StateError", "__version__"]
