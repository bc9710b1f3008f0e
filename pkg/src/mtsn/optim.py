"""Adam optimizer with bias correction.

Update rule per step t (per parameter, elementwise):

    m <- beta1*m + (1-beta1)*g        m_hat = m / (1 - beta1^t)
    v <- beta2*v + (1-beta2)*g^2      v_hat = v / (1 - beta2^t)
    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)

The epsilon sits outside the square root. State is kept per named
parameter so it can ride along in checkpoints for exact resumption.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from .errors import ContractError
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ContractError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ContractError(
                f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if not self.eps > 0:
            raise ContractError(f"eps must be positive, got {self.eps}")
        if self.t < 0:
            raise ContractError(f"step count must be nonnegative, got {self.t}")


def init_adam(params: Mapping[str, Tensor], lr: float = 0.001, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Fresh zeroed moment buffers for every named parameter."""
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adam_step(state: AdamState, params: Mapping[str, Tensor]) -> None:
    """One in-place update; every parameter must carry a gradient."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"adam_step: parameter '{name}' has no gradient")
        if p.grad.shape != p.data.shape:
            raise ContractError(
                f"adam_step: gradient shape {p.grad.shape} does not match "
                f"parameter '{name}' shape {p.data.shape}")
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def zero_grads(params: Mapping[str, Tensor]) -> None:
    """Reset every gradient buffer to zeros (allocating if absent)."""
    for p in params.values():
        p.grad = np.zeros_like(p.data)
