"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    pass


class NumericFailureError(FloatingPointError):
    """Raised when a computation produces NaN or inf values."""


class LoadError(RuntimeError):
    """A frozen model or checkpoint could not be located or read."""


class CapabilityError(RuntimeError):
    """The requested operation is not supported by a model adapter."""


class ConfigError(ValueError):
    pass


class WriteError(OSError):
    pass
