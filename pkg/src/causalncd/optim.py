"""AdamW with decoupled weight decay, plus the step-decay learning rate rule.

The trainer halves the learning rate every ``decay_every`` epochs and never
lets it drop below ``lr_floor``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Array, Tensor
from .errors import ParameterError, UsageError


@dataclass
class OptimState:
    """Per-parameter first/second moment estimates and the step counter."""

    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[Array] = field(default_factory=list)
    v: list[Array] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not (self.lr > 0.0):
            raise ParameterError(f"learning rate must be positive, got {self.lr}")
        if self.weight_decay < 0.0:
            raise ParameterError("weight decay must be non-negative")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ParameterError("Adam betas must lie in [0, 1)")


def init_optim(params: Sequence[Tensor], lr: float, weight_decay: float = 0.0,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> OptimState:
    state = OptimState(lr=lr, weight_decay=weight_decay, beta1=beta1,
                       beta2=beta2, eps=eps)
    state.m = [np.zeros_like(p.data) for p in params]
    state.v = [np.zeros_like(p.data) for p in params]
    return state


def optim_step(params: Sequence[Tensor], grads: Sequence[Array],
               state: OptimState) -> OptimState:
    """One AdamW update, in place on ``params``.

    Weight decay is decoupled: applied directly to the parameters, scaled by
    the current learning rate, independent of the gradient moments.  With an
    all-zero gradient and zero decay the parameters are left bit-identical.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise UsageError("optim_step: params/grads/state length mismatch")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** state.step
    bias2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise UsageError(
                f"optim_step: gradient shape {g.shape} does not match parameter {p.data.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / bias1
        v_hat = state.v[i] / bias2
        update = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if state.weight_decay != 0.0:
            update = update + state.lr * state.weight_decay * p.data
        p.data = p.data - update
    return state


def decayed_lr(base_lr: float, epoch: int, decay_every: int = 5,
               factor: float = 0.5, floor: float = 1e-5) -> float:
    """Step decay: multiply by ``factor`` every ``decay_every`` epochs, floored."""
    if decay_every <= 0:
        raise ParameterError("decay_every must be a positive integer")
    if not (base_lr > 0.0):
        raise ParameterError("base learning rate must be positive")
    lr = base_lr * factor ** (epoch // decay_every)
    return max(lr, floor)
