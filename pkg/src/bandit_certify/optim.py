"""Adam on flat parameter vectors."""
from dataclasses import dataclass

import numpy as np


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, size):
        return cls(np.zeros(size), np.zeros(size), 0)


@dataclass(frozen=True)
class OptimSettings:
    """Optimizer and minibatching knobs for bound minimisation."""

    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 256
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


def adam_step(params, grads, state, settings):
    """One bias-corrected Adam update.

    Returns the new parameter vector and the new state; inputs are not
    modified.
    """
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError("params, grads and state must have the same shape")
    b1, b2 = settings.beta1, settings.beta2
    step = state.step + 1
    m = b1 * state.m + (1.0 - b1) * grads
    v = b2 * state.v + (1.0 - b2) * grads * grads
    m_hat = m / (1.0 - b1**step)
    v_hat = v / (1.0 - b2**step)
    new = params - settings.lr * m_hat / (np.sqrt(v_hat) + settings.eps_adam)
    return new, AdamState(m, v, step)
