"""Adam with decoupled weight decay, over ``{name: ndarray}`` parameter maps."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float, weight_decay: float = 0.0) -> None:
    """One in-place update of every parameter that has a gradient.

    Decay is applied to the parameter first (``p -= lr * wd * p``), then the
    bias-corrected Adam step.
    """
    state.t += 1
    bc1 = 1.0 - BETA1 ** state.t
    bc2 = 1.0 - BETA2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        if weight_decay:
            p -= lr * weight_decay * p
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + EPS)


class Adam:
    """Thin stateful wrapper used by the training loops."""

    def __init__(self, params: Dict[str, np.ndarray], lr: float, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.state = AdamState()

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        adam_step(self.params, grads, self.state, self.lr, self.weight_decay)

    def reset(self) -> None:
        self.state = AdamState()

