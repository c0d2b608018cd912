"""Stochastic block model in log-odds coordinates.

Memberships Z_i are categorical with probabilities pi(a) parameterized by
omega(a) = log(pi(a)/pi(K)) for a < K; edges are Bernoulli with logit
nu(a, b) = log(H(a,b)/(1-H(a,b))), nu symmetric. The adjacency matrix is
symmetric with a zero diagonal, and all pair sums run over the upper
triangle (ordered-pair double counts are expressed as twice that sum).
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit, logsumexp

from ..errors import EnumerationBudgetError

ENUMERATION_BUDGET = 10**7


def softplus(x):
    return np.logaddexp(0.0, x)


def log_pi_from_omega(omega: np.ndarray) -> np.ndarray:
    """(k,) log membership probabilities; the last class is the reference."""
    full = np.concatenate([np.asarray(omega, dtype=float), [0.0]])
    return full - logsumexp(full)


def check_adjacency(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("adjacency must be square")
    if not np.array_equal(a, a.T):
        raise ValueError("adjacency must be symmetric")
    if np.any(np.diag(a) != 0):
        raise ValueError("adjacency diagonal must be zero")
    if not np.isin(a, (0, 1)).all():
        raise ValueError("adjacency entries must be 0 or 1")
    return a.astype(float)


def complete_loglik(a: np.ndarray, z: np.ndarray, omega: np.ndarray,
                    nu: np.ndarray) -> float:
    """log p(z, a | omega, nu): membership terms plus upper-triangle edge terms."""
    logpi = log_pi_from_omega(omega)
    iu, ju = np.triu_indices(a.shape[0], k=1)
    v = nu[z[iu], z[ju]]
    edges = a[iu, ju]
    return float(np.sum(logpi[z]) + np.sum(edges * v - softplus(v)))


def _configs(n: int, k: int):
    """Mixed-radix enumeration of membership vectors, chunked."""
    total = k**n
    radix = k ** np.arange(n)
    chunk = 1 << 16
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        yield (idx[:, None] // radix[None, :]) % k


def _config_logliks(a, omega, nu, digits):
    logpi = log_pi_from_omega(omega)
    iu, ju = np.triu_indices(a.shape[0], k=1)
    edges = a[iu, ju]
    out = logpi[digits].sum(axis=1)
    v = nu[digits[:, iu], digits[:, ju]]
    out += np.sum(edges[None, :] * v - softplus(v), axis=1)
    return out


def require_budget(n: int, k: int):
    if k**n > ENUMERATION_BUDGET:
        raise EnumerationBudgetError(
            f"enumeration over {k}^{n} membership vectors exceeds the "
            f"{ENUMERATION_BUDGET:.0e} budget")


def enumerate_log_marginal(a: np.ndarray, omega: np.ndarray, nu: np.ndarray) -> float:
    """log sum over all k^n membership vectors of p(z, a | omega, nu)."""
    n = a.shape[0]
    k = nu.shape[0]
    require_budget(n, k)
    parts = [logsumexp(_config_logliks(a, omega, nu, d)) for d in _configs(n, k)]
    return float(logsumexp(np.array(parts)))


def enumerate_profile(a: np.ndarray, omega: np.ndarray, nu: np.ndarray) -> np.ndarray:
    """The maximizing membership vector; ties resolve to the lowest enumeration index."""
    n = a.shape[0]
    k = nu.shape[0]
    require_budget(n, k)
    best_val = -math.inf
    best = None
    offset = 0
    for digits in _configs(n, k):
        ll = _config_logliks(a, omega, nu, digits)
        j = int(np.argmax(ll))
        if ll[j] > best_val:
            best_val = float(ll[j])
            best = digits[j].copy()
        offset += digits.shape[0]
    return best


def edge_probabilities(nu: np.ndarray) -> np.ndarray:
    return expit(nu)


def upper_indices(k: int):
    """Row-major upper-triangle index pairs (a <= b) for the symmetric nu."""
    return [(a, b) for a in range(k) for b in range(a, k)]


def pack_nu(nu: np.ndarray) -> np.ndarray:
    return np.array([nu[a, b] for a, b in upper_indices(nu.shape[0])])


def unpack_nu(values, k: int) -> np.ndarray:
    nu = np.zeros((k, k))
    for (a, b), v in zip(upper_indices(k), values):
        nu[a, b] = nu[b, a] = float(v)
    return nu
