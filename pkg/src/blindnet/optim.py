"""Adam and the step learning-rate schedule."""
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = None
    v: np.ndarray = None


def adam_step(param, state):
    """Bias-corrected Adam update of ``param.data`` in place."""
    if param.grad is None:
        raise ValueError("adam_step: parameter has no gradient")
    g = param.grad
    if state.m is None:
        state.m = np.zeros_like(param.data)
        state.v = np.zeros_like(param.data)
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * g
    state.v = state.beta2 * state.v + (1 - state.beta2) * g * g
    m_hat = state.m / (1 - state.beta1 ** state.step)
    v_hat = state.v / (1 - state.beta2 ** state.step)
    param.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.dtype)


def step_lr(epoch, base_lr, step_size, gamma):
    if step_size < 1:
        raise ValueError("step_size must be >= 1")
    return base_lr * gamma ** (epoch // step_size)


@dataclass
class Adam:
    """Adam over a named parameter dict, one :class:`AdamState` each."""

    params: dict
    lr: float = 1e-3
    states: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in self.params:
            self.states.setdefault(name, AdamState(lr=self.lr))

    def set_lr(self, lr):
        self.lr = lr
        for st in self.states.values():
            st.lr = lr

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        for name, p in self.params.items():
            if p.grad is not None:
                adam_step(p, self.states[name])
