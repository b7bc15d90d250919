"""Exception types shared across the package."""


class PBPError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(PBPError, ValueError):
    """Malformed input: structure, file contents, evidence or configuration."""


class NumericalError(PBPError, ArithmeticError):
    """A computation could not produce a meaningful number."""


class ZeroEvidenceError(NumericalError):
    """The evidence has (estimated) probability zero."""


class SingularDesignError(NumericalError):
    """An unregularized regression has no identifiable solution."""


class TreeMismatchError(ValidationError):
    """Learned parameters were produced for a different junction tree."""
