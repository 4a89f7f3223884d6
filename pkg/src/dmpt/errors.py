"""Exception hierarchy shared by every layer of the package."""


class DmptError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class DimensionError(DmptError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(DmptError, ValueError):
    """A scalar hyperparameter is out of its valid range."""


class LabelError(DmptError, ValueError):
    """A class label is outside [0, K)."""


class ContractError(DmptError, RuntimeError):
    """A documented precondition was violated by the caller."""


class DegenerateVectorError(DmptError, ValueError):
    """A vector with zero norm was passed where a direction is required."""


class OptimizerError(DmptError, RuntimeError):
    """A parameter handed to the optimizer has no gradient."""


class FormatError(DmptError, ValueError):
    """A binary container file is malformed."""

    exit_code = 2

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(DmptError, ValueError):
    """Invalid experiment or backbone configuration."""


class PlanError(DmptError, ValueError):
    """A prompt-injection plan does not fit the image encoder."""


class VocabularyError(DmptError, KeyError):
    """A word or class id is not in the vocabulary."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class DataError(DmptError, ValueError):
    """Dataset contents do not satisfy what an operation needs."""

    exit_code = 2


class DivergenceError(DmptError, FloatingPointError):
    """Training produced a non-finite loss."""

    exit_code = 3

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
