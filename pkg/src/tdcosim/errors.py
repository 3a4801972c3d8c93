"""Exception hierarchy shared by all solver and data modules."""

from __future__ import annotations


class TdCosimError(Exception):
    """Base class for every error raised by this package."""


class ModelError(TdCosimError, ValueError):
    """Network or problem data is structurally invalid."""


class TopologyError(ModelError):
    """Feeder graph is not a tree rooted at its head node."""


class InputError(TdCosimError, ValueError):
    """User-supplied input (CSV rows, seeds, points) is malformed."""


class RangeError(InputError):
    """A query point lies outside the domain of a partition."""


class MappingError(InputError):
    """A seed or element has no entry in a required mapping."""


class ConfigError(TdCosimError, ValueError):
    """Run configuration is missing fields or holds illegal values."""


class StalenessError(TdCosimError):
    """An aggregate was requested before all of its inputs were solved."""


class NumericalError(TdCosimError, ArithmeticError):
    """A numerical routine broke down (singular matrix, cycling, ...)."""


class NonConvergenceError(NumericalError):
    """An iterative method hit its iteration cap.

    Attributes:
        mismatch: last mismatch norm seen before giving up.
        iterations: number of iterations performed.
        trace: optional per-iteration mismatch history.
    """

    def __init__(self, message: str, mismatch: float, iterations: int, trace=None):
        super().__init__(f"{message} (mismatch={mismatch:.3e}, iterations={iterations})")
        self.mismatch = mismatch
        self.iterations = iterations
        self.trace = list(trace) if trace is not None else []


class SolverError(TdCosimError):
    """An optimization run could not produce a solution."""
