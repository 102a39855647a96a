"""Adam optimizer over positional parameter lists.

Parameters are immutable tensors, so a step returns replacement tensors;
moment buffers are kept by position, which must stay stable across steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from tsa.errors import AdaptationError, ShapeError
from tsa.numerics.tensor import Tensor, param


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def decay_lr(self, factor: float):
        self.lr *= factor


def adam_step(params: list[Tensor], grads: list[np.ndarray | None], state: AdamState) -> list[Tensor]:
    """One Adam update; entries with a None gradient pass through unchanged."""
    if len(params) != len(grads):
        raise ShapeError("params and grads length mismatch")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    for p, g in zip(params, grads):
        if g is not None and g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} vs param {p.data.shape}")
        if g is not None and not np.all(np.isfinite(g)):
            raise AdaptationError("NaN or Inf gradient in adam_step")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    out: list[Tensor] = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            out.append(p)
            continue
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        new_data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        out.append(param(new_data))
    return out
