"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI and service: ConfigError and ParseError
are user-input problems (exit 2); NumericError, TrainingError and
AdaptationError are numeric failures (exit 3).
"""


class TsaError(Exception):
    """Base class for all package errors."""


class ShapeError(TsaError):
    """Tensor or matrix dimensions do not conform."""


class ContractError(TsaError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""


class ConfigError(TsaError):
    """Invalid configuration value or combination."""


class ParseError(TsaError):
    """Malformed input file; message carries line/field context."""


class DegenerateInputError(TsaError):
    """Input is structurally valid but degenerate for the operation."""


class NumericError(TsaError):
    """Non-finite values or numeric breakdown during computation."""


class TrainingError(NumericError):
    """Pretraining diverged or failed."""


class AdaptationError(NumericError):
    """Test-time adaptation failed (e.g. NaN gradients)."""


class CheckpointError(TsaError):
    """Model or graph checkpoint cannot be read."""
