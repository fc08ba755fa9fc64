"""Adam with decoupled weight decay over named parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import GradientError, Tensor

__all__ = ["AdamState", "adam_step"]


class OptimizerError(GradientError):
    """A parameter is missing its gradient at step time."""


@dataclass
class AdamState:
    """Adam moment buffers plus hyperparameters.

    The decay is decoupled: parameters are multiplied by
    ``1 - lr * weight_decay`` before the moment-based update, so the decay
    strength does not depend on the gradient scale.
    """

    lr: float = 0.001
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """One in-place Adam update over every parameter in ``params``.

    Gradients are read from each tensor's ``.grad``; a missing gradient is
    an error (the step would silently skip part of the model otherwise).
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise OptimizerError(f"no gradient for parameter '{missing[0]}' at step {state.step + 1}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    decay = 1.0 - state.lr * state.weight_decay
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(p.data)
        if state.weight_decay != 0.0:
            p.data *= decay
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
