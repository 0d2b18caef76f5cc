"""Bias-corrected Adam on flat parameter vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0 or not self.eps > 0:
            raise ValueError("learning rate and epsilon must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0)


def adam_step(state: AdamState, params, grad, config: AdamConfig):
    """One Adam update. Returns (new_state, new_params); inputs are not modified."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape or state.m.shape != params.shape:
        raise DimensionError(f"Adam shapes differ: params {params.shape}, grad {grad.shape}, state {state.m.shape}")
    t = state.t + 1
    m = config.beta1 * state.m + (1.0 - config.beta1) * grad
    v = config.beta2 * state.v + (1.0 - config.beta2) * grad * grad
    m_hat = m / (1.0 - config.beta1**t)
    v_hat = v / (1.0 - config.beta2**t)
    new = params - config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return AdamState(m, v, t), new
