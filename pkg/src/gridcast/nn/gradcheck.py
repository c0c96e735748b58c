"""Central finite-difference checking of analytic gradients.

The numeric side only ever calls the forward pass, so it stays independent of
every backward implementation it verifies. Use float64 parameters; float32
has too little headroom for the difference quotient.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


def numerical_gradient(f: Callable[[], float], x: np.ndarray,
                       h: float = 1e-5) -> np.ndarray:
    """d f / d x by central differences, perturbing x in place element-wise."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(|a|, |n|, 1), robust where gradients vanish."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
    return float(np.max(np.abs(a - n) / denom))


def check_gradient(f: Callable[[], float], x: np.ndarray, analytic: np.ndarray,
                   h: float = 1e-5) -> float:
    """Return the max relative error between analytic and central differences."""
    return max_relative_error(analytic, numerical_gradient(f, x, h))
