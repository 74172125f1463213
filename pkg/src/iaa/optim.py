"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    pass


def cosine_lr(peak: float, steps: int, warmup_ratio: float, step: int) -> float:
    """Linear warmup from 0 over floor(warmup_ratio * steps) steps, then cosine to 0."""
    if not 0 <= step <= steps:
        raise ValueError(f"step {step} outside [0, {steps}]")
    warmup = int(math.floor(warmup_ratio * steps))
    if step < warmup:
        return peak * step / warmup
    span = steps - warmup
    if span == 0:
        return peak
    return peak * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / span))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: list[tuple[str, Tensor]],
    state: OptimizerState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.98),
    eps: float = 1e-6,
    weight_decay: float = 0.0,
):
    """One in-place AdamW update over trainable tensors that carry a gradient."""
    for name, p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(f"non-finite gradient in {name}")
    state.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params:
        if not p.trainable:
            raise ValueError(f"{name} is frozen and must not reach the optimizer")
        g = p.grad
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        with np.errstate(over="raise"):
            try:
                v += (1.0 - b2) * (g * g)
            except FloatingPointError as exc:
                raise NonFiniteGradientError(f"second-moment overflow in {name}") from exc
        if weight_decay:
            p.data -= (lr * weight_decay) * p.data
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_grad_norm(params: list[tuple[str, Tensor]], max_norm: float) -> float:
    grads = [p.grad for _, p in params if p.grad is not None]
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale
    return total
