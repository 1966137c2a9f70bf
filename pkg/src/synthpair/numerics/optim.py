"""AdamW with global-norm clipping and a linear-warmup learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .nn import Parameter


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, names: list[str], step: int):
        super().__init__(f"non-finite gradient at update {step + 1} in: {', '.join(names[:8])}")
        self.names = names
        self.step = step


def lr_at_step(step: int, base_lr: float, warmup_steps: int) -> float:
    """Linear ramp from 0 to ``base_lr`` over ``warmup_steps``, constant afterwards."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if warmup_steps <= 0 or step >= warmup_steps:
        return base_lr
    return base_lr * step / warmup_steps


@dataclass
class OptimizerState:
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)
    step: int = 0


def global_grad_norm(grads: Sequence[np.ndarray | None]) -> float:
    total = 0.0
    for g in grads:
        if g is not None:
            total += float(np.sum(np.square(g, dtype=np.float64)))
    return math.sqrt(total)


def adamw_step(params: Sequence[Parameter], grads: Sequence[np.ndarray | None],
               state: OptimizerState, lr: float, betas: tuple[float, float] = (0.9, 0.99),
               weight_decay: float = 1e-4, clip_norm: float | None = 1.0,
               eps: float = 1e-8) -> float:
    """One decoupled-weight-decay Adam update, in place. Returns the pre-clip grad norm.

    Frozen parameters (``trainable=False``) are skipped entirely; a missing
    gradient on a trainable parameter counts as zero.
    """
    live = [(i, p, g) for i, (p, g) in enumerate(zip(params, grads)) if p.trainable]
    bad = [p.name or f"param[{i}]" for i, p, g in live if g is not None and not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradientError(bad, state.step)
    norm = global_grad_norm([g for _, _, g in live])
    scale = 1.0
    if clip_norm is not None and clip_norm > 0 and norm > clip_norm:
        scale = clip_norm / (norm + 1e-12)

    state.step += 1
    t = state.step
    b1, b2 = betas
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for i, p, g in live:
        key = id(p)
        if key not in state.m:
            state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        m, v = state.m[key], state.v[key]
        if g is None:
            g = np.zeros_like(p.data)
        elif scale != 1.0:
            g = g * scale
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay:
            update = update + weight_decay * p.data
        p.data -= (lr * update).astype(p.dtype, copy=False)
    return norm


class AdamW:
    """Stateful wrapper: reads ``p.grad`` and follows the warmup schedule."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-4, warmup_steps: int = 5000,
                 betas: tuple[float, float] = (0.9, 0.99), weight_decay: float = 1e-4,
                 clip_norm: float | None = 1.0, eps: float = 1e-8):
        self.params = list(params)
        self.base_lr = lr
        self.warmup_steps = warmup_steps
        self.betas = betas
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.eps = eps
        self.state = OptimizerState()
        self.last_lr = 0.0
        self.last_grad_norm = 0.0

    def current_lr(self) -> float:
        return lr_at_step(self.state.step + 1, self.base_lr, self.warmup_steps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.last_lr = self.current_lr()
        self.last_grad_norm = adamw_step(
            self.params, [p.grad for p in self.params], self.state, self.last_lr,
            self.betas, self.weight_decay, self.clip_norm, self.eps)
