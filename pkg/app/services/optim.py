"""Adam with optional lr-scaled L1/L2 terms."""

import logging
from dataclasses import dataclass, field
from typing import Dict, MutableMapping

import numpy as np

from app.errors import DimensionError, OptimizerError

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            step=self.step,
            first_moment={k: v.copy() for k, v in self.first_moment.items()},
            second_moment={k: v.copy() for k, v in self.second_moment.items()},
        )


def adam_step(
    params: MutableMapping[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay_l2: float = 0.0,
    l1: float = 0.0,
) -> AdamState:
    """Update ``params`` in place and advance ``state`` by one step.

    Every parameter must have a gradient of the same shape. A non-finite gradient
    aborts before any parameter is touched.
    """
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            raise OptimizerError(f"no gradient for parameter '{name}'", parameter=name)
        if grad.shape != param.shape:
            raise DimensionError(f"gradient shape {grad.shape} != parameter shape {param.shape} for '{name}'")
        if not np.isfinite(grad).all():
            raise OptimizerError(f"non-finite gradient for parameter '{name}'", parameter=name)

    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step

    for name, param in params.items():
        grad = grads[name]
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(param)
            v = np.zeros_like(param)
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.first_moment[name] = m
        state.second_moment[name] = v

        update = (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        if weight_decay_l2:
            update = update + weight_decay_l2 * param
        if l1:
            update = update + l1 * np.sign(param)
        param -= lr * update

    return state
