"""Variational log likelihood and variational-EM point estimation.

M_n(theta; x) profiles the evidence lower bound over the local factors only,
at a fixed global parameter. For the mixture the profile is available in
closed form and equals the exact log likelihood; the mixed model solves one
concave 2-parameter problem per group; the block model runs an inner
responsibility CAVI. The variational frequentist estimate maximizes M_n by
EM: local profiling as the E step, closed-form or Newton parameter updates
as the M step.

The LAN probe evaluates M_n on a rescaled lattice around a center and fits
the implied quadratic form by least squares, reporting the sup-norm
residual and the fitted curvature.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDataError, EnumerationBudgetError
from .meanfield_vb import (
    CategoricalLocals,
    GaussianLocals,
    _pair_weights,
    sbm_initial_globals,
    sbm_initial_labels,
    sbm_resp_sweep,
)
from .models import (
    Dataset,
    GlmmModel,
    GmmModel,
    Model,
    SbmModel,
    coord_names,
    model_kind,
    simulate,
    theta_vector,
)
from .models import glmm as glmm_math
from .models import gmm as gmm_math
from .models import sbm as sbm_math
from .optimize import newton_nd_max
from .rng import child_seed

INNER_MAX_SWEEPS = 10000

# ---------------------------------------------------------------------------
# theta vector round trip


def theta_from_vector(model: Model, v, natural: bool = True):
    """Inverse of models.theta_vector for the given coordinate convention."""
    from .models import GlmmParams, SbmParams

    v = np.asarray(v, dtype=float)
    if isinstance(model, GmmModel):
        return v.copy()
    if isinstance(model, GlmmModel):
        return GlmmParams.from_vector(v, log_scale=not natural)
    if isinstance(model, SbmModel):
        return SbmParams.from_vector(v, model.k)
    raise TypeError(f"not a model: {model!r}")


# ---------------------------------------------------------------------------
# variational log likelihood


def _sbm_inner_value(a, resp, base, nu, sp) -> float:
    n = resp.shape[0]
    n_pairs, o_pairs = _pair_weights(resp, a)
    k = nu.shape[0]
    iu = np.triu_indices(k)
    edge = float(np.sum(o_pairs[iu] * nu[iu]) - np.sum(n_pairs[iu] * sp[iu]))
    lse = float(np.logaddexp.reduce(base))
    member = float(resp.sum(axis=0) @ base) - n * lse
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -float(np.sum(np.where(resp > 0, resp * np.log(resp), 0.0)))
    return member + edge + ent


def _sbm_soft_start(a, k) -> np.ndarray:
    n = a.shape[0]
    resp = np.full((n, k), 1.0 / k)
    if n:
        hard = sbm_initial_labels(a, k)
        resp = np.full((n, k), 0.1 / max(k - 1, 1))
        resp[np.arange(n), hard] = 0.9
        resp /= resp.sum(axis=1, keepdims=True)
    return resp


def variational_loglik(model: Model, theta, data: Dataset,
                       inner_tol: float = 1e-10, init=None):
    """sup over local factors of E[log p(x, z | theta) - log q(z)].

    Returns (value, locals). The mixture profile is exact (the optimal local
    factors are the per-datum posteriors, making the bound tight); the mixed
    model profiles each group's Gaussian factor by damped Newton; the block
    model runs inner CAVI sweeps to relative tolerance inner_tol, starting
    from `init` when given, else from a degree-binned start plus (on
    enumerable instances) the profile one-hot start, keeping the best.
    """
    if isinstance(model, GmmModel):
        from .models import as_gmm_means

        means = as_gmm_means(theta)
        x = np.asarray(data.x, dtype=float)
        if x.size == 0:
            return 0.0, CategoricalLocals(np.zeros((0, model.k)))
        return (gmm_math.mixture_loglik(x, means),
                CategoricalLocals(gmm_math.responsibilities(x, means)))

    if isinstance(model, GlmmModel):
        p = theta
        y = np.asarray(data.y, dtype=float)
        if y.shape[0] == 0:
            return 0.0, GaussianLocals(np.zeros(0), np.ones(0))
        eta = glmm_math.cell_eta(data.x, p.beta0, p.beta1)
        b = np.exp(eta).sum(axis=1)
        ysum = y.sum(axis=1)
        if init is not None:
            mu0, lam0 = init.mu, init.lam
        else:
            mu0, lam0 = glmm_math.default_local_init(ysum, b)
        mu, lam = glmm_math.optimize_group_factors(ysum, b, 1.0 / p.sigma2, mu0, lam0)
        val = glmm_math.variational_loglik_value(y, eta, mu, lam, p.sigma2)
        return val, GaussianLocals(mu, lam)

    if isinstance(model, SbmModel):
        p = theta
        a = sbm_math.check_adjacency(data.adjacency)
        n = a.shape[0]
        k = model.k
        if n == 0:
            return 0.0, CategoricalLocals(np.zeros((0, k)))
        base = np.concatenate([p.omega, [0.0]])
        sp = sbm_math.softplus(p.nu)
        if init is not None:
            starts = [np.asarray(init.resp, dtype=float).copy()]
        else:
            starts = [_sbm_soft_start(a, k)]
            if k**n <= sbm_math.ENUMERATION_BUDGET:
                z = sbm_math.enumerate_profile(a, p.omega, p.nu)
                onehot = np.zeros((n, k))
                onehot[np.arange(n), z] = 1.0
                starts.append(onehot)
        best_val, best_resp = -math.inf, None
        for resp in starts:
            val = _sbm_inner_value(a, resp, base, p.nu, sp)
            for _ in range(INNER_MAX_SWEEPS):
                sbm_resp_sweep(a, resp, base, p.nu, sp)
                new = _sbm_inner_value(a, resp, base, p.nu, sp)
                if abs(new - val) <= inner_tol * (1.0 + abs(val)):
                    val = new
                    break
                val = new
            else:
                raise RuntimeError(
                    f"inner CAVI did not converge in {INNER_MAX_SWEEPS} sweeps")
            if val > best_val:
                best_val, best_resp = val, resp
        return best_val, CategoricalLocals(best_resp)

    raise TypeError(f"not a model: {model!r}")


# ---------------------------------------------------------------------------
# variational EM


@dataclass
class VfeResult:
    theta_hat: object
    m_n_value: float
    em_iterations: int
    inner_traces: np.ndarray
    converged: bool

    def vector(self, model: Model, natural: bool = True) -> np.ndarray:
        return theta_vector(model, self.theta_hat, natural=natural)


def _gmm_em(model: GmmModel, data: Dataset, init_theta, tol, max_iter):
    x = np.asarray(data.x, dtype=float)
    k = model.k
    if init_theta is not None:
        means = np.asarray(init_theta, dtype=float).copy()
    elif x.size:
        means = np.quantile(x, [(j + 1.0) / (k + 1.0) for j in range(k)])
    else:
        means = np.zeros(k)
    val = gmm_math.mixture_loglik(x, means) if x.size else 0.0
    trace = [val]
    converged = x.size == 0
    it = 0
    for it in range(1, max_iter + 1):
        r = gmm_math.responsibilities(x, means)
        counts = r.sum(axis=0)
        # an emptied component keeps its mean rather than dividing by zero
        new = np.where(counts > 1e-300, (r * x[:, None]).sum(axis=0)
                       / np.where(counts > 0, counts, 1.0), means)
        means = new
        new_val = gmm_math.mixture_loglik(x, means)
        trace.append(new_val)
        if abs(new_val - val) <= tol * (1.0 + abs(val)):
            converged = True
            val = new_val
            break
        val = new_val
    locals_ = CategoricalLocals(gmm_math.responsibilities(x, means)
                                if x.size else np.zeros((0, k)))
    return means, val, it, trace, converged, locals_


def _glmm_em(model: GlmmModel, data: Dataset, init_theta, tol, max_iter):
    from .models import GlmmParams

    y = np.asarray(data.y, dtype=float)
    x = np.asarray(data.x, dtype=float)
    m = y.shape[0]
    if m == 0 or not np.any(y > 0):
        raise DegenerateDataError(
            "all counts are zero; the intercept diverges and the fit is refused")
    if init_theta is not None:
        p = init_theta
    else:
        p = GlmmParams(math.log(y.mean() + 0.5), np.zeros(model.n_covariates), 1.0)
    ysum = y.sum(axis=1)
    log_y_fact = float(np.sum(glmm_math.gammaln(y + 1.0)))
    inner_tol = tol * 1e-2
    locs = None
    val = -math.inf
    trace = []
    converged = False
    it = 0
    xt = np.concatenate([np.ones(x.shape[:2] + (1,)), x], axis=2)  # (m, n, d+1)
    for it in range(1, max_iter + 1):
        # E step: profile the group factors at the current theta
        val_new, locs = variational_loglik(model, p, data, inner_tol=inner_tol,
                                           init=locs)
        mu, lam = locs.mu, locs.lam

        # exact objective-preserving recentering of the flat direction
        delta = float(mu.mean())
        p = GlmmParams(p.beta0 + delta, p.beta1, p.sigma2)
        mu = mu - delta
        locs = GaussianLocals(mu, lam)

        # M step: sigma2 closed form, beta by Newton on the completed
        # Poisson objective with expected-rate offsets
        sigma2 = float((mu * mu + lam).sum() / m)
        eloc = np.exp(mu + 0.5 * lam)
        beta = np.concatenate([[p.beta0], p.beta1])

        def value(b):
            eta = np.einsum("ijc,c->ij", xt, b)
            with np.errstate(over="ignore"):
                w = np.exp(eta) * eloc[:, None]
            if not np.all(np.isfinite(w)):
                return -math.inf
            return float((y * eta).sum() - w.sum())

        def grad(b):
            eta = np.einsum("ijc,c->ij", xt, b)
            w = np.exp(eta) * eloc[:, None]
            return np.einsum("ij,ijc->c", y - w, xt)

        def hess(b):
            eta = np.einsum("ijc,c->ij", xt, b)
            w = np.exp(eta) * eloc[:, None]
            return -np.einsum("ij,ijc,ijd->cd", w, xt, xt)

        beta, _ = newton_nd_max(value, grad, hess, beta, max_step=3.0)
        p = GlmmParams(float(beta[0]), beta[1:], sigma2)

        # objective value after the M step, shifted by the data constant
        # for the relative test
        val_new, locs = variational_loglik(model, p, data, inner_tol=inner_tol,
                                           init=locs)
        trace.append(val_new)
        shifted_new = val_new + log_y_fact
        shifted_old = val + log_y_fact if math.isfinite(val) else -math.inf
        if math.isfinite(shifted_old) and \
                abs(shifted_new - shifted_old) <= tol * (1.0 + abs(shifted_old)):
            val = val_new
            converged = True
            break
        val = val_new
    return p, val, it, trace, converged, locs


def _sbm_em(model: SbmModel, data: Dataset, init_theta, tol, max_iter):
    from .models import SbmParams

    a = sbm_math.check_adjacency(data.adjacency)
    n = a.shape[0]
    k = model.k
    total = a.sum() / 2.0
    if n < 2 or total == 0 or total == n * (n - 1) / 2.0:
        raise DegenerateDataError(
            "empty or complete graph; edge log odds diverge and the fit is refused")
    if init_theta is not None:
        p = init_theta
        resp = None
    else:
        resp = _sbm_soft_start(a, k)
        omega0, nu0 = sbm_initial_globals(a, resp.argmax(axis=1), k)
        p = SbmParams(omega0, nu0)
    inner_tol = tol * 1e-2
    val = -math.inf
    trace = []
    converged = False
    it = 0
    locs = CategoricalLocals(resp) if resp is not None else None
    for it in range(1, max_iter + 1):
        val_e, locs = variational_loglik(model, p, data, inner_tol=inner_tol,
                                         init=locs)
        p = _sbm_m_step(locs.resp, a, k)
        val_new, locs = variational_loglik(model, p, data, inner_tol=inner_tol,
                                           init=locs)
        trace.append(val_new)
        if math.isfinite(val) and abs(val_new - val) <= tol * (1.0 + abs(val)):
            val = val_new
            converged = True
            break
        val = val_new
    return p, val, it, trace, converged, locs


def _sbm_m_step(resp, a, k):
    from .models import SbmParams

    counts = resp.sum(axis=0)
    if np.any(counts < 1e-12):
        raise DegenerateDataError("a block emptied during the M step")
    omega = np.log(counts[:-1]) - math.log(counts[-1])
    n_pairs, o_pairs = _pair_weights(resp, a)
    iu = np.triu_indices(k)
    dens = np.zeros((k, k))
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = o_pairs / n_pairs
    if np.any(n_pairs[iu] < 1e-12) or np.any(frac[iu] <= 0) or np.any(frac[iu] >= 1):
        raise DegenerateDataError("a block pair has no mass or a saturated density")
    nu = np.log(frac) - np.log1p(-frac)
    nu = 0.5 * (nu + nu.T)
    return SbmParams(omega, nu)


def fit_vfe(model: Model, data: Dataset, init_theta=None, tol: float = 1e-8,
            max_iter: int = 1000) -> VfeResult:
    """Maximize the variational log likelihood by variational EM.

    The objective trace (M_n after each M step) is nondecreasing; convergence
    is relative change below tol, with additive data constants excluded for
    the mixed model.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if isinstance(model, GmmModel):
        out = _gmm_em(model, data, init_theta, tol, max_iter)
    elif isinstance(model, GlmmModel):
        out = _glmm_em(model, data, init_theta, tol, max_iter)
    elif isinstance(model, SbmModel):
        out = _sbm_em(model, data, init_theta, tol, max_iter)
    else:
        raise TypeError(f"not a model: {model!r}")
    theta, val, it, trace, converged, _locs = out
    return VfeResult(theta, float(val), it, np.asarray(trace), converged)


# ---------------------------------------------------------------------------
# LAN probe


def default_h_grid(d: int, radius: int = 2, max_points: int = 625) -> np.ndarray:
    """Centered integer lattice {-radius..radius}^d, trimmed to max_points.

    Trimming keeps the points of smallest Euclidean norm, ties broken
    lexicographically, so the grid stays centered and deterministic.
    """
    axes = [np.arange(-radius, radius + 1)] * d
    pts = np.array(list(itertools.product(*axes)), dtype=float)
    if len(pts) > max_points:
        norms = (pts * pts).sum(axis=1)
        order = np.lexsort(tuple(pts[:, j] for j in reversed(range(d))) + (norms,))
        pts = pts[order[:max_points]]
    return pts


def delta_n_vector(model: Model, data: Dataset) -> np.ndarray:
    """Per-coordinate rate multipliers at the observed size.

    Mixture means contract at 1/sqrt(n). Mixed-model intercept and variance
    contract at 1/sqrt(m), slopes at 1/sqrt(mn). Block-model log odds of
    membership contract at 1/sqrt(n), edge logits at 1/sqrt(n^2 rho) with
    rho the observed mean edge density.
    """
    if isinstance(model, GmmModel):
        n = len(data.x)
        return np.full(model.k, n ** -0.5)
    if isinstance(model, GlmmModel):
        m = data.y.shape[0]
        n = model.group_size
        d = model.n_covariates
        return np.array([m ** -0.5] + [(m * n) ** -0.5] * d + [m ** -0.5])
    if isinstance(model, SbmModel):
        n = data.adjacency.shape[0]
        rho = data.adjacency.sum() / max(n * (n - 1), 1)
        k = model.k
        return np.concatenate([np.full(k - 1, n ** -0.5),
                               np.full(k * (k + 1) // 2, (n * n * rho) ** -0.5)])
    raise TypeError(f"not a model: {model!r}")


@dataclass
class QuadraticFit:
    delta: np.ndarray | None
    v: np.ndarray
    linear: np.ndarray
    sup_residual: float
    min_eigenvalue: float


def quadratic_lan_fit(h_grid: np.ndarray, values: np.ndarray) -> QuadraticFit:
    """Least-squares fit of values ~ h'b - h'Vh/2 over the lattice.

    Returns the fitted symmetric V, the linear coefficient b, the implied
    center delta = V^{-1} b when V is nonsingular, the sup-norm residual,
    and the smallest eigenvalue of V.
    """
    h = np.asarray(h_grid, dtype=float)
    y = np.asarray(values, dtype=float)
    d = h.shape[1]
    cols = [h[:, i] for i in range(d)]
    cols += [-0.5 * h[:, i] ** 2 for i in range(d)]
    cols += [-h[:, i] * h[:, j] for i in range(d) for j in range(i + 1, d)]
    design = np.column_stack(cols)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    b = coef[:d]
    v = np.zeros((d, d))
    np.fill_diagonal(v, coef[d:2 * d])
    pos = 2 * d
    for i in range(d):
        for j in range(i + 1, d):
            v[i, j] = v[j, i] = coef[pos]
            pos += 1
    resid = float(np.max(np.abs(design @ coef - y))) if len(y) else 0.0
    eigs = np.linalg.eigvalsh(v)
    delta = None
    if abs(np.linalg.det(v)) > 1e-12 * max(1.0, float(np.max(np.abs(v))) ** d):
        delta = np.linalg.solve(v, b)
    return QuadraticFit(delta, v, b, resid, float(eigs.min()))


@dataclass
class LanReport:
    rows: list  # (n, rep, sup_residual, v_min_eigenvalue)

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "rep", "sup_residual", "V_min_eigenvalue"])
            for n, rep, res, eig in self.rows:
                w.writerow([n, rep, repr(float(res)), repr(float(eig))])

    def median_residuals(self) -> dict:
        out = {}
        for n in sorted({r[0] for r in self.rows}):
            out[n] = float(np.median([r[2] for r in self.rows if r[0] == n]))
        return out


def lan_expansion_probe(model: Model, data_generator, theta0, h_grid=None,
                        n_list=(400, 6400), reps: int = 100,
                        seed: int | None = None,
                        objective=None) -> LanReport:
    """Evaluate the local quadratic quality of M_n around theta0.

    data_generator(n, rep) supplies datasets; passing None uses the model
    simulator with child seeds of `seed`. For each dataset the probe
    evaluates M_n(theta0 + delta_n * h) - M_n(theta0) on the lattice
    (natural coordinates, with per-coordinate rates from delta_n_vector),
    fits the quadratic form, and records the sup residual. `objective`
    overrides M_n evaluation for synthetic checks: called as
    objective(theta_vector, data).
    """
    center = theta_vector(model, theta0, natural=True)
    if h_grid is None:
        h_grid = default_h_grid(center.size)
    h_grid = np.asarray(h_grid, dtype=float)
    if data_generator is None:
        if seed is None:
            raise ValueError("need a seed when no data_generator is given")

        def data_generator(n, rep):
            return simulate(model, theta0, n, child_seed(seed, n, rep))

    rows = []
    for n in n_list:
        for rep in range(reps):
            data = data_generator(n, rep)
            dn = delta_n_vector(model, data)

            locs = None

            def m_n(vec):
                nonlocal locs
                if objective is not None:
                    return float(objective(vec, data))
                th = theta_from_vector(model, vec, natural=True)
                val, locs = variational_loglik(model, th, data, init=locs)
                return val

            base = m_n(center)
            values = np.array([m_n(center + dn * h) - base for h in h_grid])
            fit = quadratic_lan_fit(h_grid, values)
            rows.append((int(n), int(rep), fit.sup_residual, fit.min_eigenvalue))
    return LanReport(rows)
