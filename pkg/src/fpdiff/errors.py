"""Exception types shared across the package.

Each maps to a CLI exit code: UsageError -> 2, NumericError and its
subclasses -> 3, AuditError -> 4.
"""


class UsageError(ValueError):
    """Bad arguments, bad config, or a contract violated by the caller."""


class NumericError(RuntimeError):
    """Non-finite values or numeric overflow inside a computation."""


class DivergenceError(NumericError):
    """Fixed-point iteration diverged; carries the trace gathered so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class AuditError(RuntimeError):
    """Compute-cost audit mismatch between a plan and an execution trace."""
