"""Decoupled-weight-decay Adam, gradient clipping, and the warmup+cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import OptimizerError
from .tensor import Tensor


@dataclass
class AdamWState:
    """Per-parameter moment buffers plus the shared step counter and hyperparameters."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.0


def init_adamw(
    params: dict[str, Tensor],
    beta1: float = 0.9,
    beta2: float = 0.98,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> AdamWState:
    state = AdamWState(beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adamw_step(params: dict[str, Tensor], state: AdamWState, lr: float) -> None:
    """One update with bias correction; weight decay is applied to the parameter directly."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        if p.grad is None:
            raise OptimizerError(f"parameter {name!r} has no gradient")
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay != 0.0:
            p.data -= lr * state.weight_decay * p.data
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.zero_grad()


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= np.asarray(factor, dtype=p.grad.dtype)
    return norm


@dataclass(frozen=True)
class LrSchedule:
    peak_lr: float
    warmup_steps: int
    total_steps: int
    floor_lr: float = 0.0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not (0 <= self.warmup_steps <= self.total_steps):
            raise ValueError("need 0 <= warmup_steps <= total_steps")
        if not (0.0 <= self.floor_lr <= self.peak_lr):
            raise ValueError("need 0 <= floor_lr <= peak_lr")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Linear warmup from 0 to the peak, cosine decay to the floor, then constant."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < schedule.warmup_steps:
        return schedule.peak_lr * step / schedule.warmup_steps
    if step >= schedule.total_steps:
        return schedule.floor_lr
    span = schedule.total_steps - schedule.warmup_steps
    progress = (step - schedule.warmup_steps) / span
    return schedule.floor_lr + (schedule.peak_lr - schedule.floor_lr) * 0.5 * (
        1.0 + math.cos(math.pi * progress)
    )
