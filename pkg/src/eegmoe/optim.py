"""Adam/AdamW and the two learning-rate schedules used by the pipelines."""

from __future__ import annotations

import math
from typing import List, Sequence

import numpy as np

from .tensor import DiffTensor


class Adam:
    """Adam with optional decoupled weight decay (AdamW when decay > 0 and
    ``decoupled`` is True)."""

    def __init__(self, params: Sequence[DiffTensor], lr: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, decoupled: bool = True):
        self.params: List[DiffTensor] = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.t = 0
        self._m = [np.zeros_like(p.values) for p in self.params]
        self._v = [np.zeros_like(p.values) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p.values
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            if self.weight_decay and self.decoupled:
                update = update + self.weight_decay * p.values
            p.values -= self.lr * update


def adamw(params, lr: float = 1e-3, weight_decay: float = 5e-2) -> Adam:
    return Adam(params, lr=lr, weight_decay=weight_decay, decoupled=True)


class CosineSchedule:
    """Cosine annealing from the base rate to zero over ``total_steps``."""

    def __init__(self, optimizer: Adam, total_steps: int):
        self.optimizer = optimizer
        self.base_lr = optimizer.lr
        self.total_steps = max(1, total_steps)
        self.step_count = 0

    def step(self) -> float:
        self.step_count = min(self.step_count + 1, self.total_steps)
        frac = self.step_count / self.total_steps
        self.optimizer.lr = self.base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))
        return self.optimizer.lr


class ReduceLROnPlateau:
    """Halve the rate when the monitored loss stops improving."""

    def __init__(self, optimizer: Adam, factor: float = 0.5, patience: int = 5,
                 min_lr: float = 1e-6):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, value: float) -> float:
        if value < self.best - 1e-12:
            self.best = value
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs > self.patience:
                self.optimizer.lr = max(self.min_lr,
                                        self.optimizer.lr * self.factor)
                self.bad_epochs = 0
        return self.optimizer.lr
