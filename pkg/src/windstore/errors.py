"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError (and
subclasses) -> 3, solver/model failures -> 4.
"""


class WindstoreError(Exception):
    """Base class for all package errors."""


class ConfigError(WindstoreError):
    """Invalid configuration value or forbidden parameter combination."""


class DataError(WindstoreError):
    """Unusable input data (missing file, bad format, out-of-range values)."""


class EstimationError(DataError):
    """The observed sequence does not support a valid rate-matrix estimate."""


class ModelError(WindstoreError):
    """A chain model violates its structural requirements (e.g. reducible)."""


class DegenerateBufferError(WindstoreError):
    """Zero-size storage requested from the fluid-queue path; use the
    closed-form no-storage evaluation instead."""


class SolverError(WindstoreError):
    """A limiting-distribution solve failed validation."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class UnrecoverableInstabilityError(SolverError):
    """Every stage of the stability fallback ladder was exhausted."""

    def __init__(self, message, attempts=None):
        super().__init__(message)
        self.attempts = attempts or []


class ContractError(WindstoreError):
    """An internal interface contract was violated (upstream bug indicator)."""


class OptimizerError(WindstoreError):
    """The search could not produce any feasible evaluation."""
