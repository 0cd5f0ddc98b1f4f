"""AdamW with decoupled weight decay, operating on raw parameter buffers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor

__all__ = ["AdamWState", "adamw_step"]


@dataclass
class AdamWState:
    """First/second moment buffers keyed by parameter name, plus step count."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, named: list[tuple[str, Tensor]]) -> "AdamWState":
        state = cls()
        for name, t in named:
            state.m[name] = np.zeros(t.shape, dtype=t.dtype)
            state.v[name] = np.zeros(t.shape, dtype=t.dtype)
        return state


def adamw_step(
    named_params: list[tuple[str, Tensor]],
    state: AdamWState,
    lr: float,
    weight_decay: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> int:
    """One decoupled-weight-decay Adam update; returns the new step count.

    Weight decay multiplies parameters by (1 - lr*wd) before the adaptive
    update, so a zero-gradient parameter still shrinks geometrically. A
    non-finite gradient aborts the step naming the offending parameter.
    """
    for name, t in named_params:
        g = t.grad
        if g is None:
            g = np.zeros(t.shape, dtype=t.dtype)
        elif not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter '{name}'")
    state.step += 1
    t_step = state.step
    c1 = 1.0 - beta1 ** t_step
    c2 = 1.0 - beta2 ** t_step
    for name, t in named_params:
        p = t.data
        dt = p.dtype.type
        if weight_decay:
            p -= p * dt(lr * weight_decay)
        g = t.grad
        if g is None:
            g = np.zeros(t.shape, dtype=t.dtype)
        m = state.m[name]
        v = state.v[name]
        m *= dt(beta1)
        m += dt(1.0 - beta1) * g
        v *= dt(beta2)
        v += dt(1.0 - beta2) * (g * g)
        mhat = m / dt(c1)
        vhat = v / dt(c2)
        p -= dt(lr) * mhat / (np.sqrt(vhat) + dt(eps))
    return state.step
