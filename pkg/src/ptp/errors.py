"""Exception types shared across the pipeline."""


class PtpError(Exception):
    pass


class InputError(PtpError, ValueError):
    """Argument has the wrong shape, bounds or type."""


class ConfigError(PtpError, ValueError):
    """Configuration cannot be satisfied."""


class NumericError(PtpError, FloatingPointError):
    """A NaN or inf showed up where a finite value is required."""


class StateError(PtpError, RuntimeError):
    """Object used before it was ready (unfitted, empty, ...)."""


class PlanningError(PtpError, RuntimeError):
    pass
