from __future__ import annotations

import numpy as np

from ..autodiff import Var


class SGD:
    def __init__(self, params: list[Var], lr: float):
        self.params = params
        self.lr = lr

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for p in self.params:
            if p.grad is not None:
                p.value = p.value - lr * p.grad

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: list[Var], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.05):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.value = (p.value - lr * (update + self.wd * p.value)).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
