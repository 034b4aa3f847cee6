"""AdamW with decoupled weight decay and the cosine decay schedule.

The decay is multiplicative on the parameter and applied before the moment
update, so a zero-gradient step with positive decay still shrinks weights
by exactly (1 - lr*lambda).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch
from .tensor import Tensor


@dataclass
class OptimizerState:
    """Per-parameter Adam moments plus shared hyperparameters."""

    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               state: OptimizerState, lr: float | None = None) -> OptimizerState:
    """One in-place AdamW update over a named parameter set.

    ``lr`` overrides ``state.lr`` for this step (scheduling); the moments
    and step counter advance regardless.
    """
    step_lr = state.lr if lr is None else lr
    if step_lr < 0:
        raise ValueError(f"learning rate must be nonnegative, got {step_lr}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name in sorted(params):
        p = params[name]
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeMismatch(
                f"adamw_step: gradient shape {g.shape} does not match "
                f"parameter {name} shape {p.data.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        if state.weight_decay:
            p.data *= 1.0 - step_lr * state.weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= step_lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Half-cosine decay from lr0 at step 0 to exactly 0 at total_steps."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return max(0.0, 0.5 * lr0 * (1.0 + math.cos(math.pi * step / total_steps)))
