"""Error hierarchy shared by the library and the CLI.

Every error carries a short machine-readable code and the process exit
status the CLI maps it to (2 usage, 3 data, 4 verification).
"""
from __future__ import annotations


class PgcError(Exception):
    """Base class; subclasses fix `code` and `exit_code`."""

    code = "ERROR"
    exit_code = 1

    def __init__(self, message: str, code: str | None = None):
        super().__init__(message)
        if code is not None:
            self.code = code


class ContractError(PgcError, ValueError):
    """Caller violated a documented precondition (shapes, ranges, names)."""

    code = "CONTRACT"
    exit_code = 2


class InvalidInputError(ContractError):
    """Numeric input outside the documented domain (non-finite, out of range)."""

    code = "INVALID_INPUT"


class DataError(PgcError):
    """Dataset / file problem: missing, malformed, too small, unbalanced."""

    code = "DATA"
    exit_code = 3


class TrainingError(PgcError):
    """Training cannot proceed (empty manifest, single-class data, ...)."""

    code = "TRAINING"
    exit_code = 3


class VerificationError(PgcError):
    """A self-check failed (non-deterministic forward, gradient mismatch)."""

    code = "VERIFICATION"
    exit_code = 4
