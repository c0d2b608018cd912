"""Gauss-Hermite quadrature in standard-normal form."""

from __future__ import annotations

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def hermite_rule(order: int = 21) -> tuple[np.ndarray, np.ndarray]:
    """Nodes z and weights w with E[f(Z)] = sum_i w_i f(z_i) for Z ~ N(0,1)."""
    if order < 1:
        raise ValueError("quadrature order must be positive")
    t, w = np.polynomial.hermite.hermgauss(order)
    # hermgauss integrates e^{-t^2} f(t); substitute t = z / sqrt(2).
    return np.sqrt(2.0) * t, w / np.sqrt(np.pi)


def gauss_expect(f, mean, sd, order: int = 21):
    """E[f(X)] for X ~ N(mean, sd^2), vectorized over mean/sd arrays.

    `f` must accept an array of shape (..., order).
    """
    z, w = hermite_rule(order)
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    if np.any(sd <= 0):
        raise ValueError("sd must be positive")
    vals = f(mean[..., None] + sd[..., None] * z)
    return vals @ w
