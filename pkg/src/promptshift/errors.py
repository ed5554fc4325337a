"""Exception taxonomy shared across the package.

CLI exit codes: ConfigError -> 2, FormatError -> 3, VerificationError -> 4.
"""


class DimensionError(ValueError):
    """Array shapes are inconsistent with an operation's contract."""


class DomainError(ValueError):
    """A scalar argument is outside its documented domain."""


class ConfigError(ValueError):
    """A configuration value or key is invalid."""


class FormatError(RuntimeError):
    """A serialized file is malformed, truncated, or incompatible."""


class SessionError(RuntimeError):
    """A guidance session received inputs inconsistent with its model/config."""


class VerificationError(RuntimeError):
    """A verification oracle (gradient check) exceeded its tolerance."""


class GradCheckAborted(RuntimeError):
    """The gradient check hit a non-finite function value."""
