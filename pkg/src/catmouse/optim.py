"""AdamW with decoupled weight decay, plus the step-decay schedule used
for patch optimization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamWState:
    """Per-parameter moment buffers and hyperparameters.

    ``step_count`` increments by exactly one per :func:`adamw_step` call.
    """

    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def ensure_buffers(self, params: list[Tensor]) -> None:
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]
        for mi, vi, p in zip(self.m, self.v, params):
            if mi.shape != p.data.shape or vi.shape != p.data.shape:
                raise ValueError(
                    f"optimizer state shape {mi.shape} does not match parameter {p.data.shape}"
                )


def adamw_step(params: list[Tensor], state: AdamWState) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Decay multiplies the parameter by ``1 - lr*wd`` before the
    bias-corrected moment update; it never touches the gradient.
    """
    state.ensure_buffers(params)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, m, v in zip(params, state.m, state.v):
        if p.grad is None:
            raise ValueError("adamw_step: parameter has no gradient; run backward first")
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        m_hat = m / c1
        v_hat = v / c2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def step_decay_lr(base_lr: float, epoch: int, decay_every: int, factor: float = 10.0) -> float:
    """Learning rate dropped by ``factor`` every ``decay_every`` epochs."""
    if decay_every < 1:
        return base_lr
    return base_lr * factor ** (-(epoch // decay_every))


def zero_grads(params: list[Tensor]) -> None:
    for p in params:
        p.zero_grad()
