"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: usage/config problems exit 2, file
format and I/O problems exit 3, numerical failures exit 4.
"""


class ConfigError(ValueError):
    """Invalid configuration or argument combination."""


class FormatError(IOError):
    """A container file has the wrong magic, version, or header."""


class TruncatedFileError(FormatError):
    """A container file ends before its declared payload."""


class ShapeError(FormatError):
    """Header metadata disagrees with the payload dimensions."""


class CflViolationError(ValueError):
    """Explicit time stepping would be unstable for this grid and speed field."""


class NumericalBlowupError(FloatingPointError):
    """Non-finite values appeared during a solver run."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite field values at time step {step}")


class TrainingDivergedError(FloatingPointError):
    """Training loss exploded past the divergence guard."""


class DegenerateDataError(ValueError):
    """Input data carries no variance to decompose."""
