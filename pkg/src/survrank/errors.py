"""Exception hierarchy shared across the package.

Validation/configuration problems are ValueErrors (CLI exit code 2);
estimation failures are EstimationErrors (CLI exit code 3).
"""


class SchemaError(ValueError):
    """A CSV column required by the schema is missing or misnamed."""


class RowValidationError(ValueError):
    """A data row violates a domain constraint; carries the 0-based row index."""

    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


class ConfigurationError(ValueError):
    """An analysis configuration value is out of its legal domain."""


class EstimationError(RuntimeError):
    """An estimation step could not be carried out on the given data."""


class EmptyStratumError(EstimationError):
    """A stratum required for curve fitting contains no records."""


class PositivityError(EstimationError):
    """A weight denominator is zero where an event indicator is one."""


class DegenerateNodeError(EstimationError):
    """A node contains only one treatment arm; the slope is undefined."""


class DegenerateNeighborhoodError(EstimationError):
    """The forest-weighted treatment variance at a point is zero."""
