"""Exception types shared across the package.

The CLI maps these onto exit codes: validation failures exit 1, numerical
degeneracy exits 2, and plain IO errors (OSError) exit 3.
"""


class GraysidError(Exception):
    """Base class for package errors."""


class ValidationError(GraysidError):
    """Invalid configuration, input data, or schema violation."""


class DegeneracyError(GraysidError):
    """Numerical degeneracy: collapsed weights, non-positive scale, etc.

    ``details`` carries a diagnostic dump (step index, offending statistics)
    for post-mortems.
    """

    def __init__(self, message, details=None):
        super().__init__(message)
        self.details = details or {}


class IntegrationError(DegeneracyError):
    """Non-finite value produced inside a numerical integration step."""


class SimulationBlowupError(DegeneracyError):
    """Simulated state left the sanity bound."""
