"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes do not conform for the requested operation."""


class ContractError(ValueError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""


class ConfigError(ValueError):
    """Invalid or unsatisfiable configuration value."""


class FormatError(ValueError):
    """Malformed external data (IDX file, corpus, checkpoint)."""


class EvaluationError(RuntimeError):
    """Objective produced NaN/Inf during a gradient check."""


class DivergenceError(RuntimeError):
    """Training diverged (non-finite loss or gradients).

    Carries the last-good checkpoint, when one exists, in ``checkpoint``.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class CapabilityError(TypeError):
    """Operation requested on a cell kind that does not support it."""
