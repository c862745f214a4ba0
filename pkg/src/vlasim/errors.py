__all__ = (
    "VlasimError", "InputError", "UnsupportedOperationError",
    "ConfigurationError", "RangeError", "IntegrationBlowupError",
    "ConfigParseError", "ConfigValidationError"
)


class VlasimError(Exception):
    pass


class InputError(VlasimError, ValueError):
    pass


class UnsupportedOperationError(VlasimError):
    pass


class ConfigurationError(VlasimError):
    pass


class RangeError(VlasimError):
    pass


class IntegrationBlowupError(VlasimError, RuntimeError):
    """
    Raised when a time integration produces a non-finite state
    """
    def __init__(self, message, time):
        super().__init__(message)
        self.time = time


class ConfigParseError(VlasimError):
    def __init__(self, message, line=None, column=None):
        super().__init__(message)
        self.line = line
        self.column = column


class ConfigValidationError(VlasimError):
    def __init__(self, message, field):
        super().__init__(message)
        self.field = field
