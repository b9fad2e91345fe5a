"""Exception types raised across the pipeline."""
from typing import Optional


class BundleForgeError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(BundleForgeError, ValueError):
    """Invalid configuration values or dimensions."""


class PreconditionError(BundleForgeError, ValueError):
    """An operation was called with inputs outside its contract."""


class ValidationError(BundleForgeError, ValueError):
    """A persisted or generated artifact violates an invariant."""


class ParseError(BundleForgeError, ValueError):
    """A file could not be parsed."""

    def __init__(self, message: str, line: Optional[int] = None, field: Optional[str] = None):
        location = []
        if line is not None:
            location.append(f"line {line}")
        if field is not None:
            location.append(f"field '{field}'")
        if location:
            message = f"{message} ({', '.join(location)})"
        super().__init__(message)
        self.line = line
        self.field = field


class SamplingError(BundleForgeError, ValueError):
    """A prompt instance cannot be drawn from the given bundle."""


class InfeasibleSplitError(BundleForgeError):
    """A split cannot satisfy its disjointness constraints."""


class ShapeError(BundleForgeError, ValueError):
    """Tensor dimensions do not match."""


class NumericError(BundleForgeError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} at step {step}")
        self.step = step


class ContextLengthError(BundleForgeError, ValueError):
    """A sequence is longer than the language model context."""


class DataError(BundleForgeError, KeyError):
    """Required data (e.g. a feature row) is missing."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class InvariantViolationError(BundleForgeError):
    """A hard invariant (frozen checksum, prompt purity) was broken."""


class DependencyError(BundleForgeError):
    """A pipeline step was run before the artifacts it needs exist."""
