"""Central finite-difference gradient checking for the autodiff engine."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, no_grad


def numerical_grad(f, tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """d f() / d tensor by central differences; ``f`` returns a scalar Tensor."""
    out = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0.0 else float(num / den)


def check_gradients(f, tensors, h: float = 1e-5) -> float:
    """Max relative error between autodiff and finite-difference gradients
    of ``f`` over every tensor in ``tensors``."""
    for t in tensors:
        t.zero_grad()
    loss = f()
    loss.backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad.copy()
        worst = max(worst, relative_error(analytic, numerical_grad(f, t, h)))
    return worst
