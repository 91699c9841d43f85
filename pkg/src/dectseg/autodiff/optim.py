"""Gradient-descent optimizers over named parameter tensors."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.0
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def optimizer_step(params, grads, state):
    """One bias-corrected adaptive-moment update, applied in place.

    ``params`` maps names to arrays (or tensors); ``grads`` maps the same
    names to gradient arrays.  Missing gradients count as zero.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        data = p.data if isinstance(p, Tensor) else p
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(data)
        if g.shape != data.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {data.shape}")
        m = state.first_moment.setdefault(name, np.zeros_like(data))
        v = state.second_moment.setdefault(name, np.zeros_like(data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(data.dtype)
    return params, state


def sgd_step(params, grads, state):
    """Plain SGD with optional heavy-ball momentum, in place."""
    state.step += 1
    for name, p in params.items():
        data = p.data if isinstance(p, Tensor) else p
        g = grads.get(name)
        if g is None:
            continue
        if state.momentum:
            buf = state.first_moment.setdefault(name, np.zeros_like(data))
            buf *= state.momentum
            buf += g
            g = buf
        data -= (state.lr * g).astype(data.dtype)
    return params, state


class Adam:
    """Thin stateful wrapper over :func:`optimizer_step` for a dict of tensors."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.state = OptimizerState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self):
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        optimizer_step(self.params, grads, self.state)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()
