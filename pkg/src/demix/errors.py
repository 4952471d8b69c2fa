"""Exception hierarchy shared by every demix module.

Two families matter for exit codes and HTTP mapping: ContractError
(caller broke a precondition; CLI exit 2) and FormatError / plain
OSError (broken or unreadable files; CLI exit 3).
"""


class DemixError(Exception):
    """Base class for all errors raised intentionally by this package."""


class ContractError(DemixError):
    """A documented precondition was violated by the caller."""


class DimensionError(ContractError):
    """Shapes or sizes do not line up; the message names both sides."""


class ConfigError(ContractError):
    """A configuration value violates one of its invariants."""


class TrainingDivergedError(ContractError):
    """Loss became non-finite during training."""

    def __init__(self, step, last_finite_loss):
        self.step = step
        self.last_finite_loss = last_finite_loss
        super().__init__(
            f"non-finite loss at step {step}; last finite loss was {last_finite_loss}"
        )


class FormatError(DemixError):
    """A file exists but its contents are not what the format requires."""


class CheckpointError(FormatError):
    """Checkpoint file rejected; `code` is one of 'magic', 'version', 'checksum'."""

    def __init__(self, code, message):
        self.code = code
        super().__init__(message)
