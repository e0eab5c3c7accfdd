"""Bias-corrected Adam."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    def init_for(self, params: Sequence[Tensor]) -> None:
        self.first_moment = [np.zeros_like(p.data) for p in params]
        self.second_moment = [np.zeros_like(p.data) for p in params]
        self.step_count = 0


def adam_step(params: Sequence[Tensor], state: AdamState, grads=None) -> AdamState:
    """Update ``params`` in place from their gradients and advance ``state``.

    ``grads`` defaults to each parameter's ``.grad``; a missing gradient counts
    as zero.
    """
    if not state.first_moment:
        state.init_for(params)
    if len(state.first_moment) != len(params):
        raise ValueError("Adam state was initialised for a different parameter list")
    if grads is None:
        grads = [p.grad for p in params]
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        m = state.first_moment[i]
        v = state.second_moment[i]
        if m.shape != p.data.shape:
            raise ValueError(f"moment shape {m.shape} does not match parameter shape {p.data.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        step = state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        p.data -= step.astype(p.data.dtype)
    return state
