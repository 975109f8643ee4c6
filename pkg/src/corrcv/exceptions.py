"""Exception types shared across the package."""

import numpy as np


class ConvergenceError(RuntimeError):
    """An iterative fit failed to converge or diverged.

    Carries the iteration trace (list of per-iteration diagnostics) so the
    failure point can be inspected.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []


class RankDeficiencyError(np.linalg.LinAlgError):
    """A design or curvature matrix is singular (e.g. duplicated columns)."""


class UnsupportedConfigError(ValueError):
    """An operation was requested for a model configuration it does not support."""
