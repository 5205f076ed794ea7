"""Adam, written out by hand.

The state is plain data (first and second moments per parameter name, plus
the step count) so checkpoints of a training run could carry it later.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from src.autodiff.tensor import Tensor


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update. Parameters are changed in place."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t

    for name, param in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(param.data)
            state.v[name] = np.zeros_like(param.data)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        param.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype, copy=False)
    return state


class Adam:
    """Thin stateful wrapper so loops can just call ``step``."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState()

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
             lr: float | None = None) -> None:
        adam_step(params, grads, self.state, self.lr if lr is None else lr,
                  self.beta1, self.beta2, self.eps)
