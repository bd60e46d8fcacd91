"""Adam with bias correction and optional learning-rate decay."""

from __future__ import annotations

import logging
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from persona_fusion.autodiff import Tensor

logger = logging.getLogger(__name__)


class NonFiniteGradientError(FloatingPointError):
    """Raised before an update when any gradient holds NaN or infinity."""


@dataclass
class AdamState:
    """Optimizer state and hyperparameters.

    Decay options (at most one applies):
        - ``decay_rate``/``decay_steps``: lr * decay_rate ** floor(step / decay_steps)
        - ``total_steps``: lr * max(0, 1 - step / total_steps), linear to zero

    ``weight_decay`` is decoupled and only touches parameters with two or more axes.
    """

    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    decay_rate: float | None = None
    decay_steps: int | None = None
    total_steps: int | None = None
    weight_decay: float = 0.0
    step: int = 0
    first_moments: dict[str, np.ndarray] = field(default_factory=dict)
    second_moments: dict[str, np.ndarray] = field(default_factory=dict)

    def effective_rate(self) -> float:
        """Learning rate for the next update, given ``step`` completed updates."""
        if self.decay_rate is not None and self.decay_steps:
            return self.learning_rate * self.decay_rate ** (self.step // self.decay_steps)
        if self.total_steps:
            return self.learning_rate * max(0.0, 1.0 - self.step / self.total_steps)
        return self.learning_rate


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState) -> AdamState:
    """Apply one Adam update to ``params`` in place.

    Args:
        params: Parameters by name
        grads: Gradients by name, same shapes as ``params``
        state: Moments and hyperparameters; mutated and returned

    Returns:
        The updated state (step counter advanced by exactly one)

    Raises:
        NonFiniteGradientError: If any gradient is not finite; nothing is updated
    """
    for name in params:
        grad = grads[name]
        if grad.shape != params[name].shape:
            raise ValueError(f"gradient shape {grad.shape} != parameter shape {params[name].shape} for {name}")
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradientError(f"non-finite gradient for {name}")

    rate = state.effective_rate()
    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for name, param in params.items():
        grad = grads[name]
        m = state.first_moments.get(name)
        v = state.second_moments.get(name)
        m = (1.0 - state.beta1) * grad if m is None else state.beta1 * m + (1.0 - state.beta1) * grad
        v = (1.0 - state.beta2) * grad * grad if v is None else state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.first_moments[name] = m
        state.second_moments[name] = v
        update = rate * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
        if state.weight_decay and param.ndim >= 2:
            update = update + rate * state.weight_decay * param.values
        param.values -= update.astype(param.dtype, copy=False)
    return state
