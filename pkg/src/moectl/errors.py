"""Exception hierarchy shared by all moectl modules."""


class MoectlError(Exception):
    """Base class for all moectl errors."""


class DimensionError(MoectlError):
    """Tensor shapes do not satisfy an operation's contract."""


class ContractError(MoectlError):
    """An operation precondition was violated."""


class ConfigError(MoectlError):
    """Invalid configuration value."""


class InputError(MoectlError):
    """Invalid user-supplied input (instruction, ballot, label...)."""


class RangeError(MoectlError):
    """A value (e.g. a timestep) is outside its legal range."""


class StateError(MoectlError):
    """Operation requires state (e.g. a loaded checkpoint) that is absent."""


class NumericError(MoectlError):
    """NaN/Inf or other numeric anomaly encountered."""


class CheckpointError(MoectlError):
    """Corrupt or incompatible checkpoint file."""


class PipelineError(MoectlError):
    """Dataset pipeline failure (client error, ordering violation)."""


class OracleError(MoectlError):
    """A verification oracle's own precondition failed (e.g. a
    non-deterministic loss function handed to the gradient checker)."""


class DegenerateInputError(MoectlError):
    """Metric input is degenerate (zero-norm embedding)."""


class ReportError(MoectlError):
    """Report aggregation failed (e.g. missing method outputs)."""
