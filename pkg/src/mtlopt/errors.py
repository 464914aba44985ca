"""Exception hierarchy shared by every module."""


class MtlOptError(Exception):
    """Base class for all package errors."""


class ShapeError(MtlOptError, ValueError):
    pass


class NumericError(MtlOptError, ArithmeticError):
    """A computation produced NaN or Inf."""


class StaleLatentError(MtlOptError):
    """The latent batch was encoded under shared parameters that have since changed."""


class InputError(MtlOptError, ValueError):
    pass


class ConfigError(MtlOptError, ValueError):
    pass


class FormatError(MtlOptError, ValueError):
    """Malformed file contents (IDX or CSV)."""


class IoError(MtlOptError, OSError):
    pass
