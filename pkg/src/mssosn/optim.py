"""Adam with bias correction over named parameter arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import DimensionError


@dataclass
class AdamState:
    lr: float = 1e-3
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """In-place update of ``params`` (name -> Tensor or array) from ``grads`` (name -> array)."""
    state.t += 1
    bc1 = 1.0 - state.b1 ** state.t
    bc2 = 1.0 - state.b2 ** state.t
    for name, p in params.items():
        arr = p.data if isinstance(p, Tensor) else p
        g = grads[name]
        if g.shape != arr.shape:
            raise DimensionError(f"adam_step: gradient {g.shape} does not match parameter {name} {arr.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        m, v = state.m[name], state.v[name]
        m *= state.b1
        m += (1.0 - state.b1) * g
        v *= state.b2
        v += (1.0 - state.b2) * (g * g)
        arr -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
