"""Exception types shared across the package."""

from __future__ import annotations


class ParlinError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatchError(ParlinError, ValueError):
    """Inputs disagree on feature dimension or vector length."""

    def __init__(self, message: str, *, index: int | None = None,
                 expected: int | None = None, found: int | None = None):
        super().__init__(message)
        self.index = index
        self.expected = expected
        self.found = found


class SingularSystemError(ParlinError):
    """Normal-equation system could not be factorized, even with the ridge fallback."""


class DegenerateSplitError(ParlinError, ValueError):
    """A train/test split would leave one side empty."""


class DatasetError(ParlinError):
    """Problem reading, writing, or validating a dataset file."""


class SchemaError(DatasetError):
    """CSV content does not match the declared schema."""

    def __init__(self, message: str, *, row: int | None = None,
                 column: str | None = None):
        super().__init__(message)
        self.row = row
        self.column = column


class ConstantColumnError(DatasetError):
    """A feature column is constant and cannot be standardized."""

    def __init__(self, message: str, *, column: str | None = None):
        super().__init__(message)
        self.column = column


class ProtocolError(ParlinError):
    """Malformed frame or unexpected message on the wire."""


class WorkerFailureError(ParlinError):
    """A worker failed or disconnected mid-job; the job was aborted."""

    def __init__(self, message: str, *, ranks: tuple[int, ...] = ()):
        super().__init__(message)
        self.ranks = ranks


class AdmissionTimeoutError(ParlinError):
    """The expected number of workers did not join within the admission window."""


class ConfigError(ParlinError, ValueError):
    """Invalid or unknown key in a configuration document."""

    def __init__(self, message: str, *, key: str | None = None):
        super().__init__(message)
        self.key = key


class PlanError(ParlinError):
    """A benchmark plan run failed."""

    def __init__(self, message: str, *, exit_code: int = 2):
        super().__init__(message)
        self.exit_code = exit_code
