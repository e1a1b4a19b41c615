"""Exception types shared across the package.

The CLI maps these onto exit codes: parse errors exit 2, validation
errors exit 1, internal invariant violations exit 3.
"""


class NetsimError(Exception):
    """Base class for all package errors."""


class ParseError(NetsimError, ValueError):
    """Malformed input text or file (CSV trace, JSON config, CLI flags)."""


class ValidationError(NetsimError, ValueError):
    """Well-formed input that violates a domain constraint."""


class InternalError(NetsimError, RuntimeError):
    """An internal invariant was violated; results cannot be trusted."""
