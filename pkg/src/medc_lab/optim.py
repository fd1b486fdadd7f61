from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from medc_lab.network import NetworkError, ParamSet


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: ParamSet, lr: float = 3e-4, **kw) -> "AdamState":
        return cls(lr=lr, m=[np.zeros_like(a) for a in params.arrays],
                   v=[np.zeros_like(a) for a in params.arrays], **kw)

    def copy(self) -> "AdamState":
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.step,
                         [a.copy() for a in self.m], [a.copy() for a in self.v])


def clip_grad_norm(grads: ParamSet, max_norm: float | None) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = float(np.sqrt(np.sum([np.sum(g * g) for g in grads.arrays])))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.arrays:
            g *= scale
    return norm


def optimizer_step(params: ParamSet, grads: ParamSet, state: AdamState) -> ParamSet:
    """Bias-corrected Adam update, applied in place. Returns ``params``."""
    if grads.shapes() != params.shapes() or len(state.m) != len(params):
        raise NetworkError(
            f"gradient/state shapes {grads.shapes()} do not match parameters {params.shapes()}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params.arrays, grads.arrays, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    params.version += 1
    return params
