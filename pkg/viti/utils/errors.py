"""Exception types raised across the package.

The CLI maps ConfigError to exit code 2 and NumericError to exit code 3.
"""


class VitiError(Exception):
    """Base class for all package errors."""
    exit_code = 1


class ConfigError(VitiError, ValueError):
    """Invalid configuration (divisibility, ranges, stage ordering, plugins)."""
    exit_code = 2


class AlignmentError(VitiError, ValueError):
    """Tensors that must share a shape do not."""


class ContractError(VitiError, ValueError):
    """A documented pre- or postcondition was violated."""


class EmptyMaskError(VitiError, ValueError):
    """The active set of a mask is empty."""


class NumericError(VitiError, ArithmeticError):
    """NaN/inf losses or ill-conditioned statistics."""
    exit_code = 3


class ExtractorError(VitiError, RuntimeError):
    """A feature-extractor plugin failed."""

    def __init__(self, branch, cause):
        super().__init__('extractor branch ' + repr(branch) + ' failed: ' + str(cause))
        self.branch = branch
        self.cause = cause


class RecordError(VitiError, RuntimeError):
    """Batch assembly failed for one sample record."""

    def __init__(self, record_id, cause):
        super().__init__('record ' + repr(record_id) + ': ' + str(cause))
        self.record_id = record_id
        self.cause = cause
