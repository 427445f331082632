"""Plain momentum SGD over autodiff tensors."""

from __future__ import annotations

import numpy as np

from lacrange.errors import ConfigError


class SGD:
    """``v = momentum * v + g; p -= lr * v`` for every parameter with a gradient."""

    def __init__(self, params, lr: float = 0.01, momentum: float = 0.9, weight_decay: float = 0.0):
        if lr < 0 or not 0 <= momentum < 1:
            raise ConfigError("need lr >= 0 and 0 <= momentum < 1")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            if self.lr:
                p.data -= self.lr * v
