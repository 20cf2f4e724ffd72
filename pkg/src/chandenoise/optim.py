"""Flat-vector optimizers for the denoiser parameters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class AdamState:
    """Moment buffers for ADAM; create via `AdamState.init(n)`."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, n_params: int, dtype=np.float64) -> "AdamState":
        return cls(m=np.zeros(n_params, dtype=dtype), v=np.zeros(n_params, dtype=dtype))


def adam_step(state: AdamState, theta: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    """One bias-corrected ADAM update; mutates `state`, returns new theta."""
    if grad.shape != theta.shape or state.m.shape != theta.shape:
        raise ValueError("shape mismatch between theta, grad and optimizer state")
    state.t += 1
    g = grad.astype(state.m.dtype, copy=False)
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return theta - lr * (m_hat / (np.sqrt(v_hat) + state.eps)).astype(theta.dtype)


def sgd_step(theta: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    """Plain gradient step theta - lr * grad (fine-tuning / inner loop)."""
    if grad.shape != theta.shape:
        raise ValueError("shape mismatch between theta and grad")
    return theta - lr * grad
