"""AdamW with decoupled weight decay.

theta <- theta - lr * mhat / (sqrt(vhat) + eps) - lr * wd * theta

Bias-corrected moments, one shared step counter.  Defaults follow the
common convention (beta1=0.9, beta2=0.999, eps=1e-8, wd=0.01); only the
learning rate and batch size are externally prescribed, the rest is
recorded configuration.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def init(cls, arrays: dict) -> "OptimState":
        return cls(m={k: np.zeros_like(a) for k, a in arrays.items()},
                   v={k: np.zeros_like(a) for k, a in arrays.items()},
                   step=0)


def adamw_step(arrays: dict, grads: dict, state: OptimState,
               lr: float = 5e-5, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, weight_decay: float = 0.01) -> OptimState:
    """Update ``arrays`` in place from ``grads``; returns the advanced state.

    Shapes must match the state exactly; the step counter increases by one
    per call regardless of how many arrays are updated.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, theta in arrays.items():
        if name not in grads:
            raise ContractError(f"missing gradient for {name!r}")
        g = grads[name]
        if g.shape != theta.shape:
            raise ContractError(
                f"gradient shape {g.shape} != parameter shape {theta.shape} for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mhat = m / c1
        vhat = v / c2
        # decay is decoupled but applies to the pre-update theta
        theta -= lr * mhat / (np.sqrt(vhat) + eps) + lr * weight_decay * theta
    return state
