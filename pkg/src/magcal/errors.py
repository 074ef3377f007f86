"""Exception types raised by the calibration pipeline."""


class CalibrationError(Exception):
    """Base class for all errors raised by magcal."""


class InvalidArgumentError(CalibrationError, ValueError):
    pass


class InvalidParamsError(CalibrationError, ValueError):
    """Sensor parameters violate their invariants (e.g. singular gain)."""


class InvalidInputError(CalibrationError, ValueError):
    pass


class InsufficientDataError(CalibrationError):
    """Not enough samples or sets to estimate the requested quantity."""


class EmptyDatasetError(InsufficientDataError):
    pass


class DegenerateGeometryError(CalibrationError):
    """Orientations do not excite enough directions for a unique solve."""


class NotAnEllipsoidError(CalibrationError):
    """The fitted quadric is not an ellipsoid."""


class FieldInclinationError(CalibrationError):
    """Estimated vertical field component is outside (-1, 1)."""


class InvalidStateError(CalibrationError, ValueError):
    pass


class SchemaError(CalibrationError):
    """Calibration file has an unknown or mismatched schema version."""
