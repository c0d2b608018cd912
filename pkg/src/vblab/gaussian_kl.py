"""Exact calculus for Gaussian Kullback-Leibler geometry.

Closed forms for the KL divergence between multivariate normals, the
KL-optimal projection onto independent (diagonal-covariance) normals,
differential entropy, and the total variation distance between univariate
normals. The projection keeps the target mean and sets each variance to the
reciprocal of the corresponding diagonal entry of the target's precision
matrix, which is what makes mean-field posteriors underdispersed: that
variance never exceeds the target's marginal variance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class Gaussian:
    """A multivariate normal with dense SPD covariance."""

    mean: np.ndarray
    cov: np.ndarray
    _chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise ValueError(f"shape mismatch: mean {mean.shape}, cov {cov.shape}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise ValueError("non-finite mean or covariance")
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-10 * (1.0 + np.abs(cov).max())):
            raise ValueError("covariance must be symmetric")
        cov = 0.5 * (cov + cov.T)
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance must be positive definite") from exc
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_chol", chol)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def log_det_cov(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self._chol))))

    @property
    def precision(self) -> np.ndarray:
        eye = np.eye(self.dim)
        half = np.linalg.solve(self._chol, eye)
        return half.T @ half

    def is_diagonal(self, atol: float = 0.0) -> bool:
        off = self.cov - np.diag(np.diag(self.cov))
        return bool(np.all(np.abs(off) <= atol))

    def logpdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        dev = np.atleast_2d(x) - self.mean
        half = np.linalg.solve(self._chol, dev.T)
        quad = np.sum(half * half, axis=0)
        out = -0.5 * (self.dim * _LOG_2PI + self.log_det_cov + quad)
        return out[0] if x.ndim == 1 else out


def kl_normal(q0: Gaussian, q1: Gaussian) -> float:
    """KL(q0 || q1) between multivariate normals.

    0.5 * [tr(S1^-1 S0) + (m1-m0)' S1^-1 (m1-m0) - d + log det S1 - log det S0]
    """
    if q0.dim != q1.dim:
        raise ValueError("dimension mismatch")
    half = np.linalg.solve(q1._chol, q0._chol)
    trace = float(np.sum(half * half))
    dev = np.linalg.solve(q1._chol, q1.mean - q0.mean)
    quad = float(dev @ dev)
    return 0.5 * (trace + quad - q0.dim + q1.log_det_cov - q0.log_det_cov)


def diag_kl_projection(target: Gaussian) -> Gaussian:
    """The KL(q || target) minimizer over diagonal-covariance normals.

    Keeps the target mean; variance_i = 1 / (target.precision)_ii.
    """
    prec_diag = np.diag(target.precision)
    return Gaussian(target.mean.copy(), np.diag(1.0 / prec_diag))


def entropy(g: Gaussian) -> float:
    """Differential entropy 0.5 * log((2 pi e)^d det cov)."""
    return 0.5 * (g.dim * (_LOG_2PI + 1.0) + g.log_det_cov)


def tv_normal_1d(mean0: float, sd0: float, mean1: float, sd1: float,
                 num_points: int = 4001) -> float:
    """Total variation distance between N(mean0, sd0^2) and N(mean1, sd1^2).

    0.5 * integral |p0 - p1| by Simpson's rule over the union of the two
    10-standard-deviation windows. Exact zeros return exactly 0.
    """
    if sd0 <= 0 or sd1 <= 0:
        raise ValueError("standard deviations must be positive")
    if not np.all(np.isfinite([mean0, sd0, mean1, sd1])):
        raise ValueError("non-finite parameter")
    if mean0 == mean1 and sd0 == sd1:
        return 0.0
    if num_points < 3:
        raise ValueError("need at least 3 quadrature points")
    if num_points % 2 == 0:
        num_points += 1
    lo = min(mean0 - 10.0 * sd0, mean1 - 10.0 * sd1)
    hi = max(mean0 + 10.0 * sd0, mean1 + 10.0 * sd1)
    t = np.linspace(lo, hi, num_points)
    p0 = np.exp(-0.5 * ((t - mean0) / sd0) ** 2) / (sd0 * np.sqrt(2.0 * np.pi))
    p1 = np.exp(-0.5 * ((t - mean1) / sd1) ** 2) / (sd1 * np.sqrt(2.0 * np.pi))
    diff = np.abs(p0 - p1)
    weights = np.ones(num_points)
    weights[1:-1:2] = 4.0
    weights[2:-1:2] = 2.0
    step = (hi - lo) / (num_points - 1)
    tv = 0.5 * step / 3.0 * float(weights @ diff)
    return float(min(max(tv, 0.0), 1.0))
