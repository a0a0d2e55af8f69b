"""Optimizer steps on flat parameter vectors: Adam and plain SGD."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import GradientVector, LayoutError, ParameterVector


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(m=np.zeros(size), v=np.zeros(size))


def adam_step(
    params: ParameterVector,
    grads: GradientVector,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[ParameterVector, AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    if params.layout != grads.layout:
        raise LayoutError("parameter and gradient layouts differ")
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * grads.values
    v = beta2 * state.v + (1 - beta2) * grads.values**2
    mhat = m / (1 - beta1**t)
    vhat = v / (1 - beta2**t)
    new_values = params.values - lr * mhat / (np.sqrt(vhat) + eps)
    return ParameterVector(new_values, params.layout), AdamState(m=m, v=v, t=t)


def sgd_step(params: ParameterVector, grads: GradientVector, lr: float) -> ParameterVector:
    if params.layout != grads.layout:
        raise LayoutError("parameter and gradient layouts differ")
    return ParameterVector(params.values - lr * grads.values, params.layout)
