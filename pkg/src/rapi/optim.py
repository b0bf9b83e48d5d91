"""First-order optimizers over dicts of numpy parameter arrays (updated in place)."""

from __future__ import annotations

import numpy as np

__all__ = ["SGD", "Adam", "make_optimizer", "LEARNING_RATES", "BATCH_SIZES"]

LEARNING_RATES = (0.05, 0.01, 0.005, 0.001)
BATCH_SIZES = (128, 256, 512, 1024)


class SGD:
    def __init__(self, lr: float, frozen=()):
        self.lr = lr
        self.frozen = set(frozen)

    def step(self, params: dict, grads: dict) -> None:
        for name, g in grads.items():
            if name not in self.frozen:
                params[name] -= self.lr * g


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, frozen=()):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.frozen = set(frozen)
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            if name in self.frozen:
                continue
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, lr: float, frozen=()):
    if name == "sgd":
        return SGD(lr, frozen)
    if name == "adam":
        return Adam(lr, frozen=frozen)
    raise ValueError(f"unknown optimizer {name!r} (expected 'sgd' or 'adam')")
