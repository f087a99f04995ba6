"""Exception types shared across the package.

The CLI maps these onto stable exit codes: configuration problems exit
with 2, file/format problems with 3, and numerical failures with 4.
"""


class ConfigError(ValueError):
    """A shape, option, or precondition is inconsistent with the request."""


class FormatError(IOError):
    """A file on disk does not match its declared format."""


class DivergenceError(ArithmeticError):
    """Training or an update step produced non-finite numbers."""
