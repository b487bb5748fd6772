"""Exception hierarchy shared across the package.

CLI exit-code mapping: ConfigError/UsageError -> 2, IntegrityError -> 3,
verification failures (gradcheck) -> 1.
"""


class DenomambaError(Exception):
    pass


class ShapeError(DenomambaError):
    """Operand extents are incompatible; message names both shapes."""


class ConfigError(DenomambaError):
    """Invalid configuration value (bad eps, dose, divisibility, flags)."""


class UsageError(DenomambaError):
    """API misuse: backward on an untaped value, empty aggregate, etc."""


class IntegrityError(DenomambaError):
    """Checkpoint or data file failed a magic/version/checksum check."""


class OracleError(DenomambaError):
    """A verification oracle produced a non-finite or unusable result."""


class TrainingDivergedError(DenomambaError):
    """Non-finite loss or gradient; message carries epoch/step context."""
