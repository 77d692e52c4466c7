from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, params: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params))


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float,
              weight_decay: float = 0.0) -> None:
    """In-place Adam update; weight decay enters as an L2 term in the gradient."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    g = grads + weight_decay * params if weight_decay else grads
    state.t += 1
    state.m *= BETA1
    state.m += (1.0 - BETA1) * g
    state.v *= BETA2
    state.v += (1.0 - BETA2) * (g * g)
    mhat = state.m / (1.0 - BETA1 ** state.t)
    vhat = state.v / (1.0 - BETA2 ** state.t)
    params -= lr * mhat / (np.sqrt(vhat) + EPS)


@dataclass
class Adam:
    """Adam over one parameter group."""

    params: np.ndarray
    lr: float = 0.01
    weight_decay: float = 0.0
    state: AdamState = field(init=False)

    def __post_init__(self):
        self.state = AdamState.zeros_like(self.params)

    def step(self, grads: np.ndarray) -> None:
        adam_step(self.params, grads, self.state, self.lr, self.weight_decay)
