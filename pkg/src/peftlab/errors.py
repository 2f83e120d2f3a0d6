"""Exception hierarchy and the CLI exit-code contract.

Exit codes are stable for harness scripting: 0 success, 1 config error,
2 data error, 3 numeric/training error.
"""


class PeftLabError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(PeftLabError):
    """Invalid or missing configuration value."""

    exit_code = 1


class DataError(PeftLabError):
    """Malformed input data (corpus, TSV rows, token ids)."""

    exit_code = 2


class CheckpointError(DataError):
    """Corrupt or inconsistent checkpoint file (checksum, schema)."""


class TrainingError(PeftLabError):
    """Numeric failure during optimization (non-finite loss etc.)."""

    exit_code = 3


class ShapeError(PeftLabError, ValueError):
    """Tensor dimension mismatch; message names both shapes."""


class RoutingError(PeftLabError, IndexError):
    """Routing selection index outside the module range of a site."""
