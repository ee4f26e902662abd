"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration problems exit 1,
numerical failures exit 2, I/O failures exit 3.
"""

from __future__ import annotations


class GavgError(Exception):
    """Base class for all package errors."""


class ConfigError(GavgError):
    """Invalid configuration, argument, or precondition supplied by the caller."""


class DimensionMismatchError(ConfigError):
    def __init__(self, expected: int, got: int, what: str = "matrix"):
        self.expected = expected
        self.got = got
        super().__init__(f"{what} dimension mismatch: expected {expected}, got {got}")


class ExprError(ConfigError):
    """Problem with a coefficient expression (syntax or unknown identifier)."""

    def __init__(self, message: str, offset: int | None = None,
                 expected: tuple[str, ...] = ()):
        self.offset = offset
        self.expected = expected
        detail = message
        if offset is not None:
            detail += f" at byte offset {offset}"
        if expected:
            detail += f" (expected one of: {', '.join(expected)})"
        super().__init__(detail)


class EvalError(GavgError):
    """Non-finite value produced while evaluating a coefficient field."""


class CflError(GavgError):
    """Time step violates the explicit-scheme stability certificate."""


class MonotonicityError(GavgError):
    """Stencil assembly produced negative off-center weights."""


class NumericalError(GavgError):
    """Non-finite state, failed relaxation, or other runtime numerical failure."""


class CoverageError(GavgError):
    """A tabulated generator was queried outside its tabulated range."""


class GateError(GavgError):
    """A cross-validation gate (independence, cross-method, property check) failed."""


class GuardError(ConfigError):
    """A simulation guard (stiffness, policy admissibility) rejected the request."""
