"""Adam with bias correction and a single-step learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class StepLR:
    """``base_lr`` before ``step_epoch``, ``base_lr * gamma`` from then on."""

    base_lr: float = 6e-5
    gamma: float = 1e-5 / 6e-5
    step_epoch: int = 110

    @classmethod
    def from_fraction(cls, base_lr: float, epochs: int, frac: float = 0.55, gamma: float = 1e-5 / 6e-5) -> "StepLR":
        return cls(base_lr=base_lr, gamma=gamma, step_epoch=math.ceil(frac * epochs))

    def lr(self, epoch: int) -> float:
        return self.base_lr * self.gamma if epoch >= self.step_epoch else self.base_lr


@dataclass
class Adam:
    params: list[Tensor]
    lr: float = 6e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    skipped: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in self.params]
            self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> bool:
        """Apply one update; returns False (and counts a skip) if any gradient is non-finite."""
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        if not all(np.all(np.isfinite(g)) for g in grads):
            self.skipped += 1
            return False
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.step_count
        c2 = 1 - b2**self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            upd = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - upd).astype(p.data.dtype)
        return True
