from __future__ import annotations

import math

import numpy as np

from .params import GradBundle, ParamStore


def inverse_sqrt_lr(step: int, base_lr: float, warmup: int) -> float:
    """Linear warmup to ``base_lr`` then ``1/sqrt(step)`` decay."""
    step = max(step, 1)
    if warmup <= 0:
        return base_lr
    return base_lr * min(step / warmup, math.sqrt(warmup / step))


class Adam:
    """Adam updating a :class:`ParamStore` in place."""

    def __init__(self, params: ParamStore, lr: float = 1e-3, warmup: int = 0,
                 betas=(0.9, 0.98), eps: float = 1e-9, schedule: str = "inverse_sqrt"):
        self.params = params
        self.base_lr = lr
        self.warmup = warmup
        self.betas = betas
        self.eps = eps
        self.schedule = schedule
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.lr_history: list[float] = []

    def current_lr(self, step: int | None = None) -> float:
        step = self.t + 1 if step is None else step
        if self.schedule == "constant":
            return self.base_lr
        return inverse_sqrt_lr(step, self.base_lr, self.warmup)

    def step(self, grads: GradBundle) -> float:
        lr = self.current_lr()
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        self.lr_history.append(lr)
        return lr
