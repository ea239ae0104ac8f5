"""Exception hierarchy shared by every ctseg module."""


class CTSegError(Exception):
    """Base class for all ctseg errors."""


class ShapeError(CTSegError, ValueError):
    pass


class ConfigError(CTSegError, ValueError):
    pass


class NumericsError(CTSegError, ArithmeticError):
    """Raised when a non-finite value shows up during optimisation.

    ``param`` names the offending parameter (if known), ``batch_index`` the
    batch being processed and ``last_good`` carries the last finite parameter
    set so callers can keep it.
    """

    def __init__(self, message, param=None, batch_index=None, last_good=None):
        super().__init__(message)
        self.param = param
        self.batch_index = batch_index
        self.last_good = last_good


class DataError(CTSegError, ValueError):
    pass


class FormatError(CTSegError, ValueError):
    pass


class UnsupportedError(CTSegError, ValueError):
    pass


class NoBodyFound(CTSegError, ValueError):
    pass


class UndefinedMetric(CTSegError, ArithmeticError):
    pass


class IoError(CTSegError, OSError):
    pass
