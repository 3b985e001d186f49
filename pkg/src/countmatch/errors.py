"""Exception hierarchy. Each class maps onto one CLI exit code."""
from __future__ import annotations


class CountMatchError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 4


class InputError(CountMatchError, ValueError):
    """Malformed or missing input data."""

    exit_code = 2


class ShapeError(InputError):
    """Array or mask dimensions do not agree."""


class NormalizationError(InputError):
    """A zero or non-finite vector cannot be normalized."""


class TemplateError(InputError):
    """Prompt template lacks (or repeats) the ``{category}`` placeholder."""


class FormatError(InputError):
    """An on-disk file does not follow its declared format."""


class ParseError(InputError):
    """A counter response contains no usable JSON object."""

    def __init__(self, message: str, raw_text: str = ""):
        super().__init__(message)
        self.raw_text = raw_text


class CountValueError(ParseError):
    """A counter response carried a negative or non-numeric count."""

    def __init__(self, key: str, value: object, raw_text: str = ""):
        super().__init__(f"invalid count for {key!r}: {value!r}", raw_text)
        self.key = key


class SizeGuardError(CountMatchError):
    """Brute-force enumeration refused because the problem is too large."""


class ProviderError(CountMatchError):
    """An embedding provider could not supply a vector."""

    exit_code = 3

    def __init__(self, message: str, name: str | None = None):
        super().__init__(message)
        self.name = name


class CounterError(CountMatchError):
    """The counting endpoint failed after all retries."""

    exit_code = 3
