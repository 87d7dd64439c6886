"""AdamW with decoupled weight decay.

Update per parameter p with gradient g at step t:

    m <- b1*m + (1-b1)*g            v <- b2*v + (1-b2)*g^2
    p <- p - lr*wd*p - lr * (m/(1-b1^t)) / (sqrt(v/(1-b2^t)) + eps)

Deterministic given inputs; moments live in an explicit state object so
checkpoints can carry them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericalError


@dataclass
class OptimizerState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, lr, beta1=0.9, beta2=0.95, eps=1e-8, weight_decay=0.1):
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adamw_step(params, grads, state: OptimizerState) -> None:
    """Apply one update in place to every parameter present in ``grads``.

    ``params`` maps name -> Tensor, ``grads`` maps name -> ndarray. Raises
    NumericalError on any non-finite gradient so training can abort with a
    diagnostic rather than silently corrupt the model.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None or m.shape != p.data.shape:
            raise ConfigurationError(f"optimizer state missing or misshaped for '{name}'")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for '{name}' at step {t}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.weight_decay != 0.0:
            p.data -= state.lr * state.weight_decay * p.data
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
