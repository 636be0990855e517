"""Exception hierarchy shared by the library and the CLI.

The CLI maps each family to a process exit code (see ``dualflood.cli``).
"""


class DualFloodError(Exception):
    """Base class for all library errors."""


class ConfigError(DualFloodError, ValueError):
    """Invalid or inconsistent configuration."""


class DataError(DualFloodError, ValueError):
    """Invalid input data (non-finite values, bad shapes, short history...)."""


class DatasetFormatError(DataError):
    """On-disk container could not be read."""


class ManifestError(DatasetFormatError):
    pass


class FormatVersionError(DatasetFormatError):
    pass


class ShapeMismatchError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class SchemaMismatchError(DataError):
    """Checkpoint and dataset disagree on feature layout."""


class DivergenceError(DualFloodError, ArithmeticError):
    """Training produced a non-finite loss."""
