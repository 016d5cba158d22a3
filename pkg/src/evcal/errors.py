"""Exception types raised across the calibration pipeline."""


class EvcalError(Exception):
    """Base class for all package errors."""


class EventFormatError(EvcalError):
    """Malformed event file. ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EventValidationError(EvcalError):
    """Event coordinates or polarity outside the declared sensor geometry."""


class DomainError(EvcalError, ValueError):
    """Input outside the domain on which a map is defined or invertible."""


class DegenerateGeometryError(EvcalError, ValueError):
    """Collinear points, singular systems and similar rank problems."""


class ConditioningError(EvcalError, ValueError):
    """Linear system too ill-conditioned to trust its solution."""

    def __init__(self, message, condition=None):
        if condition is not None:
            message = f"{message} (condition estimate {condition:.3g})"
        super().__init__(message)
        self.condition = condition


class InfeasibleCalibrationError(EvcalError):
    """Not enough usable data survives to run the back-end."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
