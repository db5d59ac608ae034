"""SGD with momentum and weight decay, and the polynomial learning-rate decay."""

from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np

from ..errors import DimensionError, PreconditionError


def poly_lr(iteration: int, total_iterations: int, lr_base: float, power: float = 0.9) -> float:
    """``lr_base * (1 - iteration / total_iterations) ** power``."""
    if total_iterations <= 0:
        raise PreconditionError("total_iterations must be positive")
    if not 0 <= iteration <= total_iterations:
        raise PreconditionError(f"iteration {iteration} outside [0, {total_iterations}]")
    return lr_base * (1.0 - iteration / total_iterations) ** power


def sgd_step(
    params: Sequence,
    grads: Sequence[np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
    head_multiplier: float,
    state: Optional[List[np.ndarray]] = None,
) -> List[np.ndarray]:
    """Update ``(tensor, group)`` parameters in place; returns the velocity buffers.

    Per parameter: ``g' = g + wd * theta``, ``v = momentum * v + g'`` and
    ``theta -= lr_eff * v`` where head-group parameters use ``lr * head_multiplier``.
    """
    if state is None:
        state = [np.zeros_like(t.data) for t, _ in params]
    if len(grads) != len(params) or len(state) != len(params):
        raise DimensionError("params, grads and state must have equal length")
    for (t, group), g, v in zip(params, grads, state):
        if g.shape != t.shape or v.shape != t.shape:
            raise DimensionError(f"gradient {g.shape} does not match parameter {t.shape}")
        eff = g + weight_decay * t.data if weight_decay else g
        v *= momentum
        v += eff
        step_lr = lr * head_multiplier if group == "head" else lr
        t.data -= (step_lr * v).astype(t.dtype, copy=False)
    return state


class SGD:
    def __init__(self, params, momentum=0.9, weight_decay=1e-4, head_multiplier=10.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.head_multiplier = head_multiplier
        self.state = [np.zeros_like(t.data) for t, _ in self.params]

    def step(self, lr: float) -> None:
        grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t, _ in self.params]
        sgd_step(
            self.params, grads, lr, self.momentum, self.weight_decay, self.head_multiplier, self.state
        )
