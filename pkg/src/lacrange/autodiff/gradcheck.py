"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from lacrange.autodiff import tensor as T
from lacrange.autodiff.tensor import Tensor


def numerical_grad(f: Callable[[], Tensor], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``x.data``."""
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
    return g


def check_gradients(f: Callable, x, eps: float = 1e-5) -> float:
    """Max relative error between autodiff and central-difference gradients.

    ``f`` maps the input tensor(s) to a scalar Tensor.  ``x`` is a Tensor or
    a sequence of Tensors; every one is checked.  The per-coordinate error is
    ``|a - b| / max(1, |a|, |b|)``.
    """
    xs: Sequence[Tensor] = [x] if isinstance(x, Tensor) else list(x)

    def call():
        return f(xs[0]) if isinstance(x, Tensor) else f(*xs)

    for t in xs:
        t.requires_grad = True
        t.grad = None
    T.backward(call())
    worst = 0.0
    for t in xs:
        auto = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        num = numerical_grad(call, t, eps)
        err = np.abs(auto - num) / np.maximum(1.0, np.maximum(np.abs(auto), np.abs(num)))
        worst = max(worst, float(err.max(initial=0.0)))
    return worst
