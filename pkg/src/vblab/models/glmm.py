"""Poisson generalized linear mixed model with a scalar group random effect.

Counts Y_ij ~ Poisson(exp(beta0 + beta1' X_ij + U_i)) with U_i ~ N(0, sigma2),
groups i = 1..m of fixed size. The local latents U_i are continuous, so the
inner problem of the variational likelihood optimizes one Gaussian factor
N(mu_i, lam_i) per group; that 2-parameter problem is globally concave in
(mu_i, log lam_i), which keeps the batched Newton iterations monotone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from ..errors import NonFiniteError
from ..optimize import newton2_max

# Poisson rates above this overflow the simulator and the moment algebra.
MAX_RATE = 1e15


@dataclass(frozen=True)
class CovariateLaw:
    """Marginal law of one covariate column: N(0, param^2) or Bernoulli(param)."""

    kind: str
    param: float

    def __post_init__(self):
        if self.kind not in ("normal", "bernoulli"):
            raise ValueError(f"unknown covariate law {self.kind!r}")
        if self.kind == "normal" and self.param <= 0:
            raise ValueError("normal covariate needs a positive sd")
        if self.kind == "bernoulli" and not 0.0 < self.param < 1.0:
            raise ValueError("bernoulli covariate needs p in (0, 1)")

    def draw(self, rng: np.random.Generator, shape) -> np.ndarray:
        if self.kind == "normal":
            return self.param * rng.standard_normal(shape)
        return (rng.random(shape) < self.param).astype(float)

    # Moment generating function and its first two derivatives at t.
    def mgf(self, t: float) -> float:
        if self.kind == "normal":
            return float(np.exp(0.5 * t * t * self.param**2))
        return 1.0 - self.param + self.param * float(np.exp(t))

    def mgf1(self, t: float) -> float:
        if self.kind == "normal":
            return t * self.param**2 * self.mgf(t)
        return self.param * float(np.exp(t))

    def mgf2(self, t: float) -> float:
        if self.kind == "normal":
            s2 = self.param**2
            return (s2 + t * t * s2 * s2) * self.mgf(t)
        return self.param * float(np.exp(t))


def draw_covariates(laws, m: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """(m, n, d) design array, one column per law, in law order."""
    cols = [law.draw(rng, (m, n)) for law in laws]
    return np.stack(cols, axis=-1)


def cell_eta(x: np.ndarray, beta0: float, beta1: np.ndarray) -> np.ndarray:
    """(m, n) fixed-effect linear predictor beta0 + beta1' X_ij."""
    return beta0 + x @ np.asarray(beta1, dtype=float)


def poisson_complete_term(y: np.ndarray, log_rate: np.ndarray) -> float:
    """sum_ij [Y log rate - rate - log Y!] at a full log-rate array."""
    rate = np.exp(log_rate)
    if not np.all(np.isfinite(rate)):
        raise NonFiniteError("Poisson rate overflow in complete-data likelihood")
    return float(np.sum(y * log_rate - rate) - np.sum(gammaln(y + 1.0)))


def local_objective(ysum: np.ndarray, b: np.ndarray, c):
    """Per-group inner objective on (mu, log lam).

    g(mu, lam) = ysum*mu - b*e^{mu + lam/2} - (c/2)(mu^2 + lam) + (1/2)log lam,
    with b_i the group's summed rate factor and c the precision attached to
    the random effect (1/sigma2, or its posterior expectation).
    """

    def vgh(mu, ell):
        with np.errstate(over="ignore", invalid="ignore"):
            lam = np.exp(ell)
            t = b * np.exp(mu + 0.5 * lam)
            f = ysum * mu - t - 0.5 * c * (mu * mu + lam) + 0.5 * ell
            gm = ysum - t - c * mu
            ge = -0.5 * lam * (t + c) + 0.5
            hmm = -t - c
            hme = -0.5 * t * lam
            hee = -0.5 * lam * (t * (1.0 + 0.5 * lam) + c)
        return f, gm, ge, hmm, hme, hee

    return vgh


def optimize_group_factors(ysum, b, c, mu0, lam0, step_tol=1e-11, grad_tol=1e-9):
    """Maximize every group's (mu_i, lam_i) factor jointly (batched Newton)."""
    vgh = local_objective(np.asarray(ysum, dtype=float), np.asarray(b, dtype=float), c)
    mu, ell, _ = newton2_max(vgh, mu0, np.log(lam0), step_tol=step_tol,
                             grad_tol=grad_tol, max_step=3.0)
    return mu, np.exp(ell)


def default_local_init(ysum, b):
    """Heuristic start: mu from the log ratio of counts to rate mass."""
    mu = np.log((np.asarray(ysum, dtype=float) + 0.5) / np.asarray(b, dtype=float))
    lam = np.full(mu.shape, 0.1)
    return mu, lam


def profile_random_effects(ysum, b, sigma2, tol=1e-12, max_iter=100):
    """argmax_u of Y.u - b e^u - u^2/(2 sigma2), one scalar concave problem per group."""
    ysum = np.asarray(ysum, dtype=float)
    b = np.asarray(b, dtype=float)
    u = np.log((ysum + 0.5) / b)
    for _ in range(max_iter):
        t = b * np.exp(u)
        g = ysum - t - u / sigma2
        h = -t - 1.0 / sigma2
        step = -g / h
        u = u + step
        if np.max(np.abs(step)) < tol:
            break
    return u


def variational_loglik_value(y, eta, mu, lam, sigma2):
    """Assemble the optimized inner objective at point parameters.

    sum_ij [Y (eta + mu_i) - e^{eta} e^{mu_i + lam_i/2} - log Y!]
      - (m/2) log sigma2 + m/2 - sum_i (mu_i^2 + lam_i)/(2 sigma2)
      + (1/2) sum_i log lam_i.
    """
    m = y.shape[0]
    b = np.exp(eta).sum(axis=1)
    ysum = y.sum(axis=1)
    pois = float(np.sum(y * eta) + ysum @ mu - b @ np.exp(mu + 0.5 * lam)
                 - np.sum(gammaln(y + 1.0)))
    t = float(np.sum(mu * mu + lam))
    return (pois - 0.5 * m * np.log(sigma2) + 0.5 * m - 0.5 * t / sigma2
            + 0.5 * float(np.sum(np.log(lam))))
