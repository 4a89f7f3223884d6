"""Plain SGD with a cosine learning-rate schedule and constant warm-up."""

from dataclasses import dataclass
import math

from .errors import OptimizerError, ParameterError


@dataclass
class OptimizerState:
    """Schedule position for one parameter group.

    ``warmup_steps`` leading steps run at the constant ``warmup_lr``; the
    cosine decay then spans the remaining ``total_steps - warmup_steps``
    steps, starting at exactly ``base_lr`` and reaching zero at
    ``step_index == total_steps``.
    """

    base_lr: float
    total_steps: int
    step_index: int = 0
    learning_rate: float = 0.0
    warmup_steps: int = 0
    warmup_lr: float = 1e-5

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ParameterError(f"total_steps must be positive, got {self.total_steps}")
        if self.base_lr <= 0:
            raise ParameterError(f"base_lr must be positive, got {self.base_lr}")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ParameterError(
                f"warm-up window {self.warmup_steps} must be shorter than {self.total_steps} steps"
            )
        self.learning_rate = cosine_lr(self)


def cosine_lr(state):
    """Learning rate for ``state.step_index``."""
    if state.total_steps <= 0:
        raise ParameterError("total_steps must be positive")
    if state.step_index < state.warmup_steps:
        return state.warmup_lr
    span = state.total_steps - state.warmup_steps
    progress = min(state.step_index - state.warmup_steps, span) / span
    return state.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def sgd_step(params, state):
    """In-place ``p -= lr * grad`` over ``params``; grads are cleared after.

    Tensors that do not require gradients are never touched.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        if p.grad is None:
            raise OptimizerError(f"parameter {p!r} has no gradient")
    lr = state.learning_rate
    for p in params:
        p.data -= p.data.dtype.type(lr) * p.grad
        p.grad = None
    if state.step_index < state.total_steps:
        state.step_index += 1
    state.learning_rate = cosine_lr(state)
