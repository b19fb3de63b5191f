from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import ShapeMismatch


@dataclass
class AdamState:
    """Adam moments for a fixed list of parameters.

    ``lr`` may be a scalar or a list giving one learning rate per parameter,
    which is how parameter groups (DeltaNet / LBSNet / features) are expressed.
    """

    shapes: list
    lr: object = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros(s) for s in self.shapes]
            self.v = [np.zeros(s) for s in self.shapes]

    @classmethod
    def for_params(cls, params, lr=1e-3, **kw):
        return cls([p.shape for p in params], lr=lr, **kw)

    def rates(self):
        if np.isscalar(self.lr):
            return [float(self.lr)] * len(self.shapes)
        return list(self.lr)


def adam_step(state: AdamState, params, grads):
    """In-place Adam update with bias correction. Returns ``params``."""
    if len(params) != len(state.shapes) or len(grads) != len(params):
        raise ShapeMismatch("parameter/gradient count does not match optimizer state")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for i, (p, g, lr) in enumerate(zip(params, grads, state.rates())):
        data = p.data if hasattr(p, "data") and not isinstance(p, np.ndarray) else p
        if g is None:
            g = np.zeros_like(data)
        if data.shape != g.shape or data.shape != state.m[i].shape:
            raise ShapeMismatch(f"parameter {i}: shape {data.shape} vs grad {np.shape(g)}")
        m, v = state.m[i], state.v[i]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params
