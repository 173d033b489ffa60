"""Exception hierarchy shared by every mculab module.

Each error class carries the process exit code the CLI maps it to:
configuration problems exit with 2, numeric failures with 3.
"""


class MculabError(Exception):
    exit_code = 1


class ConfigError(MculabError, ValueError):
    """Invalid configuration, hyperparameter or input contract."""

    exit_code = 2


class DimensionError(ConfigError):
    """Shapes or lengths that do not line up."""


class DomainError(ConfigError):
    """An argument outside the domain of a function, e.g. a curve parameter t not in [0, 1]."""


class ContractError(MculabError, RuntimeError):
    """A caller broke an API precondition (unsorted input, reused graph...)."""

    exit_code = 2


class NumericError(MculabError, ArithmeticError):
    """NaN/Inf or divergence detected during a computation."""

    exit_code = 3


class TrainingError(NumericError):
    """Training finished without reaching its target; carries the learning curve."""

    def __init__(self, message, curve=()):
        super().__init__(message)
        self.curve = list(curve)


class IdxFormatError(ConfigError):
    pass


class IdxTruncatedError(MculabError, OSError):
    exit_code = 2


class CheckpointError(MculabError):
    exit_code = 2


class BadMagicError(CheckpointError):
    pass


class HashMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class StageFailure(MculabError):
    """A pipeline stage failed; ``manifest`` holds the partial run manifest."""

    def __init__(self, stage, cause, manifest=None):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.manifest = manifest
        self.exit_code = getattr(cause, "exit_code", 1)
