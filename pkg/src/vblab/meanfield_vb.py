"""Mean-field variational Bayes by coordinate ascent.

The variational family factorizes completely: one Gaussian factor per global
coordinate (variance-type coordinates on the log scale) and one local factor
per datum, group, or node. Every sweep updates locals first, then globals;
each update maximizes the evidence lower bound over its own block, so the
ELBO trace is nondecreasing up to floating-point slack.

Mixture responsibilities and the mixture global factors have closed forms.
The mixed model and the block model update their Gaussian factors with a
damped Newton method on (mean, log variance); the block model's softplus
and log-sum-exp expectations use fixed Gauss-Hermite quadrature.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, xlogy

from .errors import NewtonError, NonFiniteError
from .models import (
    Dataset,
    GlmmModel,
    GmmModel,
    Model,
    SbmModel,
    coord_names,
    model_kind,
)
from .models import glmm as glmm_math
from .models import sbm as sbm_math
from .optimize import newton2_max
from .quadrature import hermite_rule
from .rng import substream

_LOG_2PI = math.log(2.0 * math.pi)

# Sweep-to-sweep slack for the monotone-ELBO invariant; scaled by the ELBO
# magnitude once that exceeds 1, since the assembly itself carries rounding
# proportional to the term sizes.
ELBO_SLACK = 1e-9

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 10000


# ---------------------------------------------------------------------------
# factor containers


@dataclass
class GlobalGaussianFactors:
    """Independent Gaussian factors over the global coordinates."""

    names: tuple
    means: np.ndarray
    sds: np.ndarray
    log_scale: np.ndarray

    def __post_init__(self):
        self.names = tuple(self.names)
        self.means = np.asarray(self.means, dtype=float).copy()
        self.sds = np.asarray(self.sds, dtype=float).copy()
        self.log_scale = np.asarray(self.log_scale, dtype=bool).copy()
        d = len(self.names)
        if not (self.means.shape == self.sds.shape == self.log_scale.shape == (d,)):
            raise ValueError("factor arrays must all have one entry per coordinate")
        if not np.all(np.isfinite(self.means)) or not np.all(np.isfinite(self.sds)):
            raise ValueError("non-finite factor parameters")
        if not np.all(self.sds > 0):
            raise ValueError("factor sds must be strictly positive")

    def copy(self) -> "GlobalGaussianFactors":
        return GlobalGaussianFactors(self.names, self.means, self.sds, self.log_scale)

    def natural_means(self) -> np.ndarray:
        """Factor means mapped back to the natural scale.

        A log-scale coordinate w carries a lognormal law on e^w, whose mean
        is exp(m + s^2/2); identity coordinates pass through.
        """
        out = self.means.copy()
        ls = self.log_scale
        out[ls] = np.exp(self.means[ls] + 0.5 * self.sds[ls] ** 2)
        return out

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass
class CategoricalLocals:
    """Row-stochastic responsibilities, one row per datum or node."""

    resp: np.ndarray

    def __post_init__(self):
        self.resp = np.asarray(self.resp, dtype=float).copy()
        if self.resp.ndim != 2:
            raise ValueError("responsibilities must be a matrix")
        if self.resp.size:
            if self.resp.min() < 0:
                raise ValueError("negative responsibility")
            err = np.abs(self.resp.sum(axis=1) - 1.0).max()
            if err > 1e-12:
                raise ValueError(f"responsibility rows must sum to 1 (off by {err:.3e})")

    def copy(self) -> "CategoricalLocals":
        return CategoricalLocals(self.resp)


@dataclass
class GaussianLocals:
    """Per-group Gaussian factors (mu_i, lam_i) for the random effects."""

    mu: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float).copy()
        self.lam = np.asarray(self.lam, dtype=float).copy()
        if self.mu.shape != self.lam.shape or self.mu.ndim != 1:
            raise ValueError("local factors need matching mean and variance vectors")
        if self.lam.size and not np.all(self.lam > 0):
            raise ValueError("local variances must be strictly positive")

    def copy(self) -> "GaussianLocals":
        return GaussianLocals(self.mu, self.lam)


@dataclass
class VariationalState:
    global_factors: GlobalGaussianFactors
    local_factors: CategoricalLocals | GaussianLocals

    def copy(self) -> "VariationalState":
        return VariationalState(self.global_factors.copy(), self.local_factors.copy())


@dataclass
class VBResult:
    global_factors: GlobalGaussianFactors
    local_factors: CategoricalLocals | GaussianLocals
    elbo_trace: np.ndarray
    iterations: int
    converged: bool

    @property
    def elbo(self) -> float:
        return float(self.elbo_trace[-1])

    def state(self) -> VariationalState:
        return VariationalState(self.global_factors, self.local_factors)

    def to_dict(self) -> dict:
        g = self.global_factors
        return {
            "global_names": list(g.names),
            "global_means": g.means.tolist(),
            "global_sds": g.sds.tolist(),
            "log_scale": g.log_scale.tolist(),
            "elbo_trace": np.asarray(self.elbo_trace).tolist(),
            "iterations": self.iterations,
            "converged": self.converged,
        }

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    def save_elbo_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "elbo"])
            for i, v in enumerate(np.asarray(self.elbo_trace)):
                w.writerow([i, repr(float(v))])


def vbe(result: VBResult, natural: bool = True) -> np.ndarray:
    """Point estimate: the mean of the variational posterior over globals.

    With natural=True (default), log-scale coordinates are reported as the
    implied lognormal mean exp(m + s^2/2); otherwise the raw factor means
    are returned unchanged.
    """
    g = result.global_factors
    return g.natural_means() if natural else g.means.copy()


# ---------------------------------------------------------------------------
# shared pieces


def _entropy_gauss(sds) -> float:
    sds = np.asarray(sds, dtype=float)
    return float(np.sum(0.5 * (_LOG_2PI + 1.0) + np.log(sds)))


def _prior_cross(means, sds, prior_sd) -> float:
    """E_q[log N(theta; 0, prior_sd^2)] summed over independent factors."""
    means = np.asarray(means, dtype=float)
    sds = np.asarray(sds, dtype=float)
    return float(np.sum(-0.5 * _LOG_2PI - math.log(prior_sd)
                 - (means**2 + sds**2) / (2.0 * prior_sd**2)))


def _site_objective(a, coeffs, xs, prec):
    """Factor objective on (m, ell = log s2) for one global Gaussian factor.

    f = a*m - sum_t coeffs_t exp(xs_t m + xs_t^2 s2 / 2)
        - (prec/2)(m^2 + s2) + ell/2,
    covering the intercept (xs = 1), slopes (xs = covariate values), the log
    variance (xs = -1), and anything else whose expected-exponential terms
    are linear-in-theta exponents. Batched over leading axes of (m, ell).
    """
    coeffs = np.asarray(coeffs, dtype=float)
    xs = np.asarray(xs, dtype=float)
    # underflowed coefficients contribute nothing to any of the sums but
    # would turn an overflowing exponential into 0 * inf = nan
    keep = coeffs != 0.0
    if not np.all(keep):
        coeffs = coeffs[keep]
        xs = xs[keep]

    def vgh(m, ell):
        m = np.asarray(m, dtype=float)
        ell = np.asarray(ell, dtype=float)
        with np.errstate(over="ignore", invalid="ignore"):
            v = np.exp(ell)
            t = coeffs * np.exp(xs * m[..., None] + 0.5 * xs * xs * v[..., None])
            s0 = t.sum(axis=-1)
            s1 = (xs * t).sum(axis=-1)
            s2 = (xs * xs * t).sum(axis=-1)
            s3 = (xs**3 * t).sum(axis=-1)
            s4 = (xs**4 * t).sum(axis=-1)
            f = a * m - s0 - 0.5 * prec * (m * m + v) + 0.5 * ell
            gm = a - s1 - prec * m
            ge = v * (-0.5 * s2 - 0.5 * prec) + 0.5
            hmm = -s2 - prec
            hme = -0.5 * v * s3
            hee = v * (-0.5 * s2 - 0.5 * prec) + v * v * (-0.25 * s4)
        # overflowing points are valid rejections, not errors: report -inf
        # so the line search backs off instead of aborting the whole fit
        bad = ~np.isfinite(t).all(axis=-1)
        if np.any(bad):
            f = np.where(bad, -np.inf, f)
            gm = np.where(bad, 0.0, gm)
            ge = np.where(bad, 0.0, ge)
            hmm = np.where(bad, -1.0, hmm)
            hme = np.where(bad, 0.0, hme)
            hee = np.where(bad, -1.0, hee)
        return f, gm, ge, hmm, hme, hee

    return vgh


def _update_site(factors: GlobalGaussianFactors, idx: int, a, coeffs, xs, prec) -> None:
    vgh = _site_objective(a, coeffs, xs, prec)
    m0 = float(factors.means[idx])
    e0 = 2.0 * math.log(float(factors.sds[idx]))
    m, e, _ = newton2_max(vgh, m0, e0, max_step=3.0)
    factors.means[idx] = m
    factors.sds[idx] = math.exp(0.5 * e)


# ---------------------------------------------------------------------------
# Gaussian mixture engine


class _GmmEngine:
    def __init__(self, model: GmmModel, data: Dataset):
        self.model = model
        self.x = np.asarray(data.x, dtype=float)
        self.n = self.x.size
        self.tau2 = model.prior_mean_sd**2

    def default_state(self) -> VariationalState:
        k = self.model.k
        if self.n:
            qs = np.quantile(self.x, [(j + 1.0) / (k + 1.0) for j in range(k)])
        else:
            qs = np.zeros(k)
        g = GlobalGaussianFactors(coord_names(self.model), qs, np.ones(k),
                                  np.zeros(k, dtype=bool))
        resp = np.full((self.n, k), 1.0 / k)
        return VariationalState(g, CategoricalLocals(resp))

    def update_locals(self, st: VariationalState) -> None:
        g = st.global_factors
        # log r_ik tracks -(x_i - m_k)^2/2 - s_k^2/2 up to a row constant
        logr = -0.5 * (self.x[:, None] - g.means) ** 2 - 0.5 * g.sds**2
        logr -= logr.max(axis=1, keepdims=True)
        r = np.exp(logr)
        r /= r.sum(axis=1, keepdims=True)
        st.local_factors = CategoricalLocals(r)

    def update_globals(self, st: VariationalState) -> None:
        r = st.local_factors.resp
        g = st.global_factors
        counts = r.sum(axis=0)
        prec = 1.0 / self.tau2 + counts
        g.means = (r * self.x[:, None]).sum(axis=0) / prec
        g.sds = 1.0 / np.sqrt(prec)

    def sweep(self, st: VariationalState) -> None:
        self.update_locals(st)
        self.update_globals(st)

    def elbo(self, st: VariationalState) -> float:
        g, r = st.global_factors, st.local_factors.resp
        sq = (self.x[:, None] - g.means) ** 2 + g.sds**2
        fit = float(np.sum(r * (-math.log(self.model.k) - 0.5 * _LOG_2PI - 0.5 * sq)))
        ent_c = -float(np.sum(xlogy(r, r)))
        return (fit + _prior_cross(g.means, g.sds, self.model.prior_mean_sd)
                + _entropy_gauss(g.sds) + ent_c)

    shifted_elbo = elbo


# ---------------------------------------------------------------------------
# Poisson mixed-model engine


class _GlmmEngine:
    def __init__(self, model: GlmmModel, data: Dataset):
        self.model = model
        self.x = np.asarray(data.x, dtype=float)
        self.y = np.asarray(data.y, dtype=float)
        self.m = self.y.shape[0]
        self.d = model.n_covariates
        self.ysum = self.y.sum(axis=1)
        self.ytot = float(self.y.sum())
        self.yx = np.einsum("ij,ijd->d", self.y, self.x) if self.m else np.zeros(self.d)
        self.log_y_fact = float(np.sum(glmm_math.gammaln(self.y + 1.0)))
        self.tau0_prec = 1.0 / model.prior_loc_sd**2
        self.tauw_prec = 1.0 / model.prior_log_sigma2_sd**2

    def default_state(self) -> VariationalState:
        names = coord_names(self.model)
        d = self.d
        # starting sds on the curvature scale of each site; a unit sd on a
        # slope whose covariate reaches |x| ~ 20 puts e^{x^2 s^2/2} far into
        # overflow before the first sweep can shrink it
        cells = max(self.m * self.y.shape[1], 1) if self.m else 1
        sds = np.empty(d + 2)
        sds[0] = (cells + self.tau0_prec) ** -0.5
        for j in range(d):
            sds[1 + j] = (float(np.sum(self.x[:, :, j] ** 2)) + self.tau0_prec) ** -0.5
        sds[d + 1] = (0.5 * max(self.m, 1) + self.tauw_prec) ** -0.5
        g = GlobalGaussianFactors(
            names, np.zeros(d + 2), sds,
            np.array([False] * (d + 1) + [True]))
        mu = np.log(self.y.mean(axis=1) + 0.5) if self.m else np.zeros(0)
        lam = np.full(self.m, 0.1)
        return VariationalState(g, GaussianLocals(mu, lam))

    # per-cell factors of E exp(beta1.x) under the current slope factors
    def _cell_gammas(self, g: GlobalGaussianFactors) -> np.ndarray:
        md = g.means[1:-1]
        sd2 = g.sds[1:-1] ** 2
        with np.errstate(over="ignore"):
            out = np.exp(md * self.x + 0.5 * sd2 * self.x**2)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError("overflow in a slope rate factor (beta1)")
        return out

    @staticmethod
    def _e0(g) -> float:
        return math.exp(g.means[0] + 0.5 * g.sds[0] ** 2)

    @staticmethod
    def _cprec(g) -> float:
        # E[1/sigma2] under the log-scale factor
        return math.exp(-g.means[-1] + 0.5 * g.sds[-1] ** 2)

    def sweep(self, st: VariationalState) -> None:
        g, loc = st.global_factors, st.local_factors
        gam = self._cell_gammas(g)
        gprod = gam.prod(axis=2)
        gsum = gprod.sum(axis=1)
        c = self._cprec(g)

        # locals
        with np.errstate(over="ignore", invalid="ignore"):
            b = self._e0(g) * gsum
        mu, lam = glmm_math.optimize_group_factors(self.ysum, b, c, loc.mu, loc.lam)

        # exact ELBO-ascent translation between the intercept and the local
        # means; without it the flat direction (beta0 + delta, mu - delta)
        # converges only at a 1 - O(1/m) geometric rate
        delta = ((c * mu.sum() - g.means[0] * self.tau0_prec)
                 / (c * self.m + self.tau0_prec))
        g.means[0] += delta
        mu = mu - delta
        st.local_factors = GaussianLocals(mu, lam)

        with np.errstate(over="ignore", invalid="ignore"):
            eloc = np.exp(mu + 0.5 * lam)

            # intercept factor
            s0 = float((gsum * eloc).sum())
        _update_site(g, 0, self.ytot, np.array([s0]), np.array([1.0]), self.tau0_prec)

        # slope factors, refreshing the shared per-cell products as each
        # coordinate moves
        for j in range(self.d):
            with np.errstate(over="ignore", invalid="ignore"):
                gam_j = np.exp(g.means[1 + j] * self.x[:, :, j]
                               + 0.5 * g.sds[1 + j] ** 2 * self.x[:, :, j] ** 2)
                others = self._e0(g) * (gprod / gam_j) * eloc[:, None]
            _update_site(g, 1 + j, self.yx[j], others.ravel(),
                         self.x[:, :, j].ravel(), self.tau0_prec)
            with np.errstate(over="ignore", invalid="ignore"):
                gam_new = np.exp(g.means[1 + j] * self.x[:, :, j]
                                 + 0.5 * g.sds[1 + j] ** 2 * self.x[:, :, j] ** 2)
                gprod = gprod / gam_j * gam_new

        # log-variance factor
        dsum = float((mu * mu + lam).sum())
        _update_site(g, self.d + 1, -0.5 * self.m, np.array([0.5 * dsum]),
                     np.array([-1.0]), self.tauw_prec)

    def shifted_elbo(self, st: VariationalState) -> float:
        """ELBO without the data constant sum(log y!)."""
        g, loc = st.global_factors, st.local_factors
        mu, lam = loc.mu, loc.lam
        gam = self._cell_gammas(g)
        gsum = gam.prod(axis=2).sum(axis=1)
        eloc = np.exp(mu + 0.5 * lam)
        c = self._cprec(g)
        lin = (self.ytot * g.means[0] + float(self.yx @ g.means[1:-1])
               + float(self.ysum @ mu))
        rate = -self._e0(g) * float(gsum @ eloc)
        re_term = (-0.5 * self.m * (_LOG_2PI + g.means[-1])
                   - 0.5 * c * float((mu * mu + lam).sum()))
        prior = (_prior_cross(g.means[:-1], g.sds[:-1], self.model.prior_loc_sd)
                 + _prior_cross(g.means[-1:], g.sds[-1:], self.model.prior_log_sigma2_sd))
        ent = _entropy_gauss(g.sds) + _entropy_gauss(np.sqrt(lam))
        return lin + rate + re_term + prior + ent

    def elbo(self, st: VariationalState) -> float:
        return self.shifted_elbo(st) - self.log_y_fact


# ---------------------------------------------------------------------------
# block-model engine


def sbm_resp_sweep(a: np.ndarray, resp: np.ndarray, base_field: np.ndarray,
                   nu_mean: np.ndarray, sp_exp: np.ndarray) -> np.ndarray:
    """One sequential pass of membership updates, in place.

    base_field holds the K expected log-odds (omega-tilde means); nu_mean and
    sp_exp hold E[nu_ab] and E[softplus(nu_ab)]. Each node is re-softmaxed
    against the field implied by all the others, so every single update is an
    exact block maximization and the pass is monotone.
    """
    n = resp.shape[0]
    if n == 0:
        return resp
    t = a @ resp          # running A R, refreshed incrementally
    s = resp.sum(axis=0)
    for i in range(n):
        f = base_field + t[i] @ nu_mean - (s - resp[i]) @ sp_exp
        f -= f.max()
        r = np.exp(f)
        r /= r.sum()
        delta = r - resp[i]
        if np.any(delta):
            t += np.outer(a[:, i], delta)
            s += delta
        resp[i] = r
    return resp


def _pair_weights(resp: np.ndarray, a: np.ndarray):
    """Expected unordered pair counts and edge counts per block pair (k x k).

    Entry (a,b) with a != b counts ordered pairs i != j once, which equals
    the unordered count of {i,j} with labels {a,b}; the diagonal counts
    unordered same-block pairs.
    """
    s = resp.sum(axis=0)
    cross = resp.T @ resp
    n_pairs = np.outer(s, s) - cross
    np.fill_diagonal(n_pairs, 0.5 * (s * s - np.diag(cross)))
    o_pairs = resp.T @ a @ resp
    np.fill_diagonal(o_pairs, 0.5 * np.diag(o_pairs))
    return n_pairs, o_pairs


def _binned_labels(a: np.ndarray, k: int) -> np.ndarray:
    n = a.shape[0]
    hard = np.zeros(n, dtype=int)
    if n:
        order = np.argsort(a.sum(axis=1), kind="stable")
        for b in range(k):
            hard[order[(b * n) // k:((b + 1) * n) // k]] = b
    return hard


def _farthest_first_lloyd(rows: np.ndarray, k: int) -> np.ndarray:
    """Deterministic k-means on the embedded rows.

    Centers seed farthest-first from the largest-norm row; an emptied
    cluster reseeds at the row farthest from its assigned center.
    """
    n = rows.shape[0]
    centers = [rows[int(np.argmax((rows * rows).sum(axis=1)))]]
    for _ in range(k - 1):
        d = np.min([((rows - c) ** 2).sum(axis=1) for c in centers], axis=0)
        centers.append(rows[int(np.argmax(d))])
    centers = np.array(centers)
    labels = np.zeros(n, dtype=int)
    for _ in range(50):
        d2 = ((rows[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new = d2.argmin(axis=1)
        for b in range(k):
            sel = new == b
            if not np.any(sel):
                worst = int(np.argmax(d2[np.arange(n), new]))
                new[worst] = b
                sel = new == b
            centers[b] = rows[sel].mean(axis=0)
        if np.array_equal(new, labels):
            break
        labels = new
    return labels


def sbm_initial_labels(a: np.ndarray, k: int) -> np.ndarray:
    """Hard block labels for initializing block-model fits.

    Clusters the leading eigenvectors of the degree-centered adjacency
    A - d d^T / sum(d); the centering removes the uninformative overall
    degree direction so the split works whether or not block densities
    separate node degrees. Degree-quantile binning is the fallback for
    graphs too small or empty for the eigenvector route.
    """
    n = a.shape[0]
    if n < 2 * k or a.sum() <= 0:
        return _binned_labels(a, k)
    deg = a.sum(axis=1)
    b = a - np.outer(deg, deg) / deg.sum()
    if n > 6 * k + 20:
        from scipy.sparse.linalg import eigsh

        v0 = np.full(n, n ** -0.5)
        _, vec = eigsh(b, k=k - 1, which="LM", v0=v0)
    else:
        w, v = np.linalg.eigh(b)
        vec = v[:, np.argsort(-np.abs(w))[: k - 1]]
    for j in range(vec.shape[1]):
        # canonical sign so the labeling is platform stable
        i = int(np.argmax(np.abs(vec[:, j])))
        if vec[i, j] < 0:
            vec[:, j] = -vec[:, j]
    return _farthest_first_lloyd(vec, k)


def sbm_initial_globals(a: np.ndarray, hard: np.ndarray, k: int):
    """Smoothed membership log odds and edge logits read off hard labels."""
    n = a.shape[0]
    counts = np.bincount(hard, minlength=k).astype(float) if n else np.ones(k)
    logp = np.log((counts + 0.5) / (counts.sum() + 0.5 * k))
    omega0 = logp[:-1] - logp[-1]
    onehot = np.zeros((n, k))
    if n:
        onehot[np.arange(n), hard] = 1.0
    n_pairs, o_pairs = _pair_weights(onehot, a)
    dens = (o_pairs + 0.5) / (n_pairs + 1.0)
    nu0 = np.log(dens) - np.log1p(-dens)
    return omega0, 0.5 * (nu0 + nu0.T)


class _SbmEngine:
    def __init__(self, model: SbmModel, data: Dataset):
        self.model = model
        self.a = sbm_math.check_adjacency(data.adjacency)
        self.n = self.a.shape[0]
        self.tau_prec = 1.0 / model.prior_sd**2
        self.z_nodes, self.z_weights = hermite_rule()

    def default_state(self) -> VariationalState:
        """Spectral hard labels, then globals read off the labels.

        Locals run first in a sweep, so an informative start must live in
        the global factors; the labels seed both.
        """
        k = self.model.k
        hard = sbm_initial_labels(self.a, k)
        resp = np.full((self.n, k), 1.0 / k)
        if self.n:
            resp = np.full((self.n, k), 0.1 / max(k - 1, 1))
            resp[np.arange(self.n), hard] = 0.9
            resp /= resp.sum(axis=1, keepdims=True)
        omega0, nu0 = sbm_initial_globals(self.a, hard, k)
        names = coord_names(self.model)
        means = np.concatenate([omega0, sbm_math.pack_nu(nu0)])
        g = GlobalGaussianFactors(names, means, np.ones(len(names)),
                                  np.zeros(len(names), dtype=bool))
        return VariationalState(g, CategoricalLocals(resp))

    def _split(self, g: GlobalGaussianFactors):
        k = self.model.k
        om, os = g.means[: k - 1], g.sds[: k - 1]
        nm = sbm_math.unpack_nu(g.means[k - 1:], k)
        ns = sbm_math.unpack_nu(g.sds[k - 1:], k)
        return om, os, nm, ns

    def _softplus_exp(self, nm, ns):
        t = nm[..., None] + ns[..., None] * self.z_nodes
        return sbm_math.softplus(t) @ self.z_weights

    def _omega_other_nodes(self, om, os, drop: int):
        """Quadrature nodes and weights for log-sum-exp shifts over the
        omega coordinates other than `drop` (the reference 0 included)."""
        vals = [np.array([0.0])]
        wts = [np.array([1.0])]
        for j in range(om.size):
            if j == drop:
                continue
            vals.append(om[j] + os[j] * self.z_nodes)
            wts.append(self.z_weights)
        grids = np.meshgrid(*vals, indexing="ij")
        stack = np.stack([gr.ravel() for gr in grids])
        shift = np.logaddexp.reduce(stack, axis=0)
        w = np.ones(1)
        for wt in wts:
            w = np.outer(w, wt).ravel()
        return shift, w

    def _e_lse(self, om, os) -> float:
        """E[log(1 + sum_a exp(omega_a))] under the current factors."""
        if om.size == 0:
            return 0.0
        shift, w = self._omega_other_nodes(om, os, drop=om.size - 1)
        # fold the last coordinate through its own rule against the rest
        t = om[-1] + os[-1] * self.z_nodes
        vals = np.logaddexp(shift[:, None], t[None, :])
        return float(w @ vals @ self.z_weights)

    def sweep(self, st: VariationalState) -> None:
        g = st.global_factors
        k = self.model.k
        om, os, nm, ns = self._split(g)
        w_sp = self._softplus_exp(nm, ns)
        base = np.concatenate([om, [0.0]])
        resp = st.local_factors.resp.copy()
        sbm_resp_sweep(self.a, resp, base, nm, w_sp)
        st.local_factors = CategoricalLocals(resp)

        n_pairs, o_pairs = _pair_weights(resp, self.a)
        s = resp.sum(axis=0)

        # omega factors: f = S_a m - n E[lse] - prior - entropy terms;
        # with the other coordinates integrated out, E[lse] is a weighted
        # sum of softplus expectations at shifted arguments.
        for aix in range(k - 1):
            om, os, nm, ns = self._split(g)
            shift, wts = self._omega_other_nodes(om, os, aix)
            vgh = self._omega_objective(float(s[aix]), shift, wts)
            m, e, _ = newton2_max(vgh, float(g.means[aix]),
                                  2.0 * math.log(float(g.sds[aix])))
            g.means[aix] = m
            g.sds[aix] = math.exp(0.5 * e)

        # nu factors, batched over the upper triangle
        pairs = sbm_math.upper_indices(k)
        o_vec = np.array([o_pairs[a_, b_] for a_, b_ in pairs])
        n_vec = np.array([n_pairs[a_, b_] for a_, b_ in pairs])
        base_ix = k - 1
        m0 = g.means[base_ix:].copy()
        e0 = 2.0 * np.log(g.sds[base_ix:])
        vgh = self._nu_objective(o_vec, n_vec)
        m, e, _ = newton2_max(vgh, m0, e0)
        g.means[base_ix:] = m
        g.sds[base_ix:] = np.exp(0.5 * e)

    def _nu_objective(self, o_vec, n_vec):
        z, w = self.z_nodes, self.z_weights
        prec = self.tau_prec

        def vgh(m, ell):
            v = np.exp(ell)
            sd = np.sqrt(v)
            t = m[..., None] + sd[..., None] * z
            sig = expit(t)
            d1 = sig @ w                      # E softplus'
            d2 = (sig * (1 - sig)) @ w        # E softplus''
            d3 = (sig * (1 - sig) * (1 - 2 * sig)) @ w
            sp = sbm_math.softplus(t) @ w
            f = o_vec * m - n_vec * sp - 0.5 * prec * (m * m + v) + 0.5 * ell
            gm = o_vec - n_vec * d1 - prec * m
            ge = v * (-0.5 * n_vec * d2 - 0.5 * prec) + 0.5
            hmm = -n_vec * d2 - prec
            hme = -0.5 * v * n_vec * d3
            d4 = ((sig * (1 - sig)) * ((1 - 2 * sig) ** 2 - 2 * sig * (1 - sig))) @ w
            hee = (v * (-0.5 * n_vec * d2 - 0.5 * prec)
                   + v * v * (-0.25 * n_vec * d4))
            return f, gm, ge, hmm, hme, hee

        return vgh

    def _omega_objective(self, s_a, shift, wts):
        z, w = self.z_nodes, self.z_weights
        prec = self.tau_prec
        n = self.n

        def vgh(m, ell):
            m = np.asarray(m, dtype=float)
            ell = np.asarray(ell, dtype=float)
            v = np.exp(ell)
            sd = np.sqrt(v)
            # arguments t - shift_r over own nodes and the other-coordinate shifts
            t = (m[..., None, None] + sd[..., None, None] * z[:, None]) - shift
            sig = expit(t)
            const = float(wts @ shift)
            sp = (sbm_math.softplus(t) * wts).sum(axis=-1) @ w + const
            d1 = (sig * wts).sum(axis=-1) @ w
            d2 = ((sig * (1 - sig)) * wts).sum(axis=-1) @ w
            d3 = ((sig * (1 - sig) * (1 - 2 * sig)) * wts).sum(axis=-1) @ w
            d4 = (((sig * (1 - sig)) * ((1 - 2 * sig) ** 2 - 2 * sig * (1 - sig)))
                  * wts).sum(axis=-1) @ w
            f = s_a * m - n * sp - 0.5 * prec * (m * m + v) + 0.5 * ell
            gm = s_a - n * d1 - prec * m
            ge = v * (-0.5 * n * d2 - 0.5 * prec) + 0.5
            hmm = -n * d2 - prec
            hme = -0.5 * v * n * d3
            hee = v * (-0.5 * n * d2 - 0.5 * prec) + v * v * (-0.25 * n * d4)
            return f, gm, ge, hmm, hme, hee

        return vgh

    def elbo(self, st: VariationalState) -> float:
        g, resp = st.global_factors, st.local_factors.resp
        k = self.model.k
        om, os, nm, ns = self._split(g)
        s = resp.sum(axis=0)
        base = np.concatenate([om, [0.0]])
        member = float(s @ base) - self.n * self._e_lse(om, os)
        n_pairs, o_pairs = _pair_weights(resp, self.a)
        w_sp = self._softplus_exp(nm, ns)
        iu = np.triu_indices(k)
        edge = float(np.sum(o_pairs[iu] * nm[iu]) - np.sum(n_pairs[iu] * w_sp[iu]))
        prior = _prior_cross(g.means, g.sds, self.model.prior_sd)
        ent = _entropy_gauss(g.sds) - float(np.sum(xlogy(resp, resp)))
        return member + edge + prior + ent

    shifted_elbo = elbo


# ---------------------------------------------------------------------------
# driver


def _engine(model: Model, data: Dataset):
    if isinstance(model, GmmModel):
        return _GmmEngine(model, data)
    if isinstance(model, GlmmModel):
        return _GlmmEngine(model, data)
    if isinstance(model, SbmModel):
        return _SbmEngine(model, data)
    raise TypeError(f"not a model: {model!r}")


def default_init(model: Model, data: Dataset) -> VariationalState:
    return _engine(model, data).default_state()


def elbo(model: Model, data: Dataset,
         global_factors: GlobalGaussianFactors,
         local_factors) -> float:
    """Evidence lower bound at an arbitrary variational state."""
    return _engine(model, data).elbo(VariationalState(global_factors, local_factors))


def _coerce_init(init) -> VariationalState:
    if isinstance(init, VariationalState):
        return init.copy()
    if isinstance(init, VBResult):
        return init.state().copy()
    if isinstance(init, tuple) and len(init) == 2:
        return VariationalState(init[0], init[1]).copy()
    raise TypeError("init must be a VariationalState, VBResult, or (globals, locals)")


def fit_vb(model: Model, data: Dataset, init=None, tol: float = DEFAULT_TOL,
           max_iter: int = DEFAULT_MAX_ITER, extra_starts: int = 0,
           seed: int | None = None) -> VBResult:
    """Coordinate-ascent ELBO maximization.

    Each iteration runs one full sweep (locals, then every global factor).
    Convergence is declared when the relative change of the ELBO, excluding
    additive data constants, falls below tol. extra_starts > 0 adds that
    many randomly perturbed starts (seeded) and keeps the best final ELBO.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    eng = _engine(model, data)
    starts = [eng.default_state() if init is None else _coerce_init(init)]
    if extra_starts:
        if seed is None:
            raise ValueError("extra_starts needs a seed")
        rng = substream(seed, 5)
        for _ in range(extra_starts):
            st = starts[0].copy()
            st.global_factors.means = st.global_factors.means + rng.normal(
                0.0, 1.0, st.global_factors.means.shape)
            starts.append(st)

    best = None
    for st in starts:
        res = _fit_from(eng, st, tol, max_iter)
        if best is None or res.elbo > best.elbo:
            best = res
    return best


def _global_vec(st: VariationalState) -> np.ndarray:
    g = st.global_factors
    return np.concatenate([g.means, np.log(g.sds)])


def _set_global_vec(st: VariationalState, v: np.ndarray) -> None:
    g = st.global_factors
    d = g.means.size
    g.means = v[:d].copy()
    g.sds = np.exp(v[d:])


def _squarem_candidate(h0, h1, h2):
    """Geometric extrapolation of three consecutive global-factor vectors.

    Coordinate ascent contracts linearly along its slowest mode; the SQUAREM
    step jumps along the extrapolated fixed-point direction. Returns None
    when the iterates give no usable direction.
    """
    r = h1 - h0
    v = (h2 - h1) - r
    vv = float(v @ v)
    if not np.isfinite(vv) or vv < 1e-30:
        return None
    alpha = -math.sqrt(float(r @ r) / vv)
    alpha = min(alpha, -1.0)
    return h0 - 2.0 * alpha * r + alpha * alpha * v


def _fit_from(eng, st: VariationalState, tol: float, max_iter: int) -> VBResult:
    trace = [eng.elbo(st)]
    prev_shift = eng.shifted_elbo(st)
    converged = False
    it = 0
    history = []
    while it < max_iter:
        accelerated = False
        if len(history) == 3:
            cand = _squarem_candidate(*history)
            history.clear()
            if cand is not None and np.all(np.isfinite(cand)):
                st_c = st.copy()
                _set_global_vec(st_c, cand)
                # one full sweep from the extrapolated point; keep it only if
                # it beats the plain sweep, so the trace stays monotone
                try:
                    with np.errstate(over="ignore", invalid="ignore"):
                        eng.sweep(st_c)
                        e_c = eng.elbo(st_c)
                except (NonFiniteError, NewtonError, FloatingPointError,
                        OverflowError):
                    e_c = -math.inf
                eng.sweep(st)
                e_p = eng.elbo(st)
                it += 1
                if math.isfinite(e_c) and e_c > e_p:
                    st = st_c
                    cur = e_c
                else:
                    cur = e_p
                accelerated = True
        if not accelerated:
            eng.sweep(st)
            it += 1
            cur = eng.elbo(st)
            history.append(_global_vec(st))
        if not math.isfinite(cur):
            raise NonFiniteError("ELBO became non-finite during a sweep")
        slack = ELBO_SLACK * max(1.0, abs(trace[-1]))
        if cur < trace[-1] - slack:
            raise NonFiniteError(
                f"ELBO decreased by {trace[-1] - cur:.3e} at iteration {it}")
        trace.append(cur)
        cur_shift = eng.shifted_elbo(st)
        if abs(cur_shift - prev_shift) <= tol * (1.0 + abs(prev_shift)):
            converged = True
            break
        prev_shift = cur_shift
    return VBResult(st.global_factors, st.local_factors, np.asarray(trace),
                    it, converged)
