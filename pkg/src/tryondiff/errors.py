"""Exception types shared across the pipeline."""


class ShapeError(ValueError):
    """Tensor extents do not satisfy an operation's contract."""


class NumericError(ArithmeticError):
    """Non-finite or otherwise invalid numeric values were encountered."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class TrainingError(RuntimeError):
    """Training diverged or could not proceed."""


class SamplingError(RuntimeError):
    """The reverse diffusion loop produced invalid state."""
