"""
Adam with bias correction; weight decay is added to the gradient before the moment updates.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional

import numpy as np

from .config import ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON, DEFAULT_LEARNING_RATE
from .errors import DimensionError, NumericalError
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    learning_rate: float = DEFAULT_LEARNING_RATE
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON
    weight_decay: float = 0.0
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be nonnegative, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            beta = getattr(self, name)
            if not 0.0 < beta < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {beta}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be nonnegative, got {self.weight_decay}")


def adam_step(state: AdamState, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
    """Update every array in `params` in place and advance the step counter."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient given for unknown parameter '{name}'")
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter '{name}' {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter '{name}'")

    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    step_size = state.learning_rate / bc1

    for name, g in grads.items():
        p = params[name]
        if state.weight_decay:
            g = g + state.weight_decay * p
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= step_size * m / (np.sqrt(v / bc2) + state.epsilon)


class Adam:
    """Adam over a fixed set of named tensors, reading their `.grad` slots."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = DEFAULT_LEARNING_RATE,
                 weight_decay: float = 0.0, state: Optional[AdamState] = None):
        self.params = dict(params)
        self.state = state or AdamState(learning_rate=lr, weight_decay=weight_decay)

    def set_learning_rate(self, lr: float) -> None:
        self.state.learning_rate = lr

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, names: Optional[Iterable[str]] = None) -> None:
        selected = self.params if names is None else {n: self.params[n] for n in names}
        arrays = {n: t.data for n, t in selected.items()}
        grads = {
            n: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for n, t in selected.items()
        }
        adam_step(self.state, arrays, grads)
