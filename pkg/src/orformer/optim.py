"""Adam and the cosine warm-restart learning-rate multiplier."""
from __future__ import annotations

import math

import numpy as np


def cosine_restart_multiplier(epoch: int, period: int = 5, mult: int = 2, floor: float = 0.0) -> float:
    """SGDR multiplier at an integer epoch: cosine decay over periods period, period*mult, ..."""
    if period < 1 or mult < 1:
        raise ValueError("period and mult must be >= 1")
    t, length = epoch, period
    while t >= length:
        t -= length
        length *= mult
    return floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * t / length))


class Adam:
    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data, dtype=np.float64) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data, dtype=np.float64) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr_mult: float = 1.0) -> None:
        self.t += 1
        lr = self.lr * lr_mult
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g.astype(np.float64) ** 2)
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)
        self.zero_grad()

    def state(self) -> dict:
        return {"t": self.t}


def sgd_step(params: dict, lr: float) -> None:
    for p in params.values():
        if p.grad is not None:
            p.data = (p.data - lr * p.grad).astype(p.data.dtype)

