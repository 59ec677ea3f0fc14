"""Exception types raised across the package."""


class SelfResError(Exception):
    pass


class DimensionError(SelfResError, ValueError):
    """Shapes or lengths of inputs do not line up."""


class ConfigError(SelfResError, ValueError):
    """A configuration value is outside what the model or plan allows."""


class RangeError(SelfResError, ValueError):
    pass


class DivisibilityError(ConfigError):
    """Total sampled frames are not an exact multiple of the segment size."""


class ContractError(SelfResError, ValueError):
    pass


class CalibrationError(SelfResError):
    """The requested planted-token recall could not be reached."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class RequestError(SelfResError, ValueError):
    """A run request could not be parsed; message names the line or field."""
