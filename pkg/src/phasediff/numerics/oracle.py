"""Finite-difference oracles.

These deliberately know nothing about the tape or the fused kernels: they
probe a black-box callable, so they stay valid checks no matter how the
differentiated code is implemented.
"""

from __future__ import annotations

import numpy as np

__all__ = ["central_difference", "directional_derivative"]


def central_difference(f, x0: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f at x0 (64-bit)."""
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.zeros_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += step
        xm[i] -= step
        grad[i] = (f(xp) - f(xm)) / (2.0 * step)
    return grad


def directional_derivative(f, x0: np.ndarray, direction: np.ndarray, step: float = 1e-6) -> float:
    """Central-difference derivative of f along `direction` at x0."""
    x0 = np.asarray(x0, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    return float((f(x0 + step * d) - f(x0 - step * d)) / (2.0 * step))
