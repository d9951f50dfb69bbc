"""Exception hierarchy shared across the lab."""


class LabError(Exception):
    """Base class for all errors raised by abstractor_lab."""


class ShapeError(LabError, ValueError):
    """Operand shapes do not conform."""


class ConfigError(LabError, ValueError):
    """A configuration value or combination is invalid."""


class CapacityError(LabError, ValueError):
    """A request exceeds a fixed capacity (sequence length, symbol bank, dataset size)."""


class ContractError(LabError, ValueError):
    """A documented precondition of a function was violated."""


class CheckpointError(LabError):
    """A checkpoint or dataset container could not be read or does not match."""


class TrainingAborted(LabError):
    """Training diverged (non-finite loss or gradient)."""
