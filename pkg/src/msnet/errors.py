"""Exception types shared across the package."""


class MsnetError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(MsnetError):
    """Invalid input values or misuse of an API contract."""


class DimensionError(ValidationError):
    """Tensor shapes do not conform."""


class ConfigError(ValidationError):
    """Invalid configuration value."""


class NumericError(MsnetError):
    """Non-finite values where finite numbers are required."""


class RowError(ValidationError):
    """A data row failed validation; carries the row locus."""

    def __init__(self, message, *, row, record_id=None):
        locus = f"row {row}" + (f" (id {record_id})" if record_id else "")
        super().__init__(f"{locus}: {message}")
        self.row = row
        self.record_id = record_id


class AlignmentError(MsnetError):
    """A mention could not be mapped onto the token sequence."""


class UnprocessableRecordError(MsnetError):
    """A record cannot be made to fit the token limit."""


class FormatError(MsnetError):
    """A file does not match its expected format."""

    def __init__(self, message, *, offset=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingDiverged(MsnetError):
    """Training hit a non-finite loss; carries the last finite history."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history else []
