"""Exception types shared across the package."""


class SambaError(Exception):
    """Base class for package-specific errors."""


class DimensionError(SambaError, ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class ContractError(SambaError, ValueError):
    """An operation was called with a violated precondition."""


class ConfigError(SambaError, ValueError):
    """Invalid model, training, or evaluation configuration."""


class NumericError(SambaError, ArithmeticError):
    """Non-finite values detected where finite values are required."""


class CheckpointError(SambaError, ValueError):
    """Base class for malformed checkpoint files."""


class CheckpointMagicError(CheckpointError):
    """File does not start with the checkpoint magic."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not supported."""


class CheckpointTruncatedError(CheckpointError):
    """Checkpoint file ended before the declared payload."""


class CheckpointShapeError(CheckpointError):
    """A stored tensor's shape disagrees with the target model."""


class VerificationFailure(SambaError):
    """One or more self-verification checks failed."""
