"""The ideal posterior over global parameters and its mean-field projection.

The ideal object is the density proportional to prior times exp(M_n), with
M_n the variational log likelihood. On one- or two-dimensional grids it can
be computed to quadrature accuracy, projected onto diagonal Gaussians, and
compared against the factors an actual mean-field fit produces. The scalar
identity ELBO_p(q) + KL(q || ideal) = log normalizer holds exactly in
infinite precision, so evaluating the three terms by independent routes
(Gauss-Hermite for the first, grid quadrature for the others) turns it
into a numerical cross-check.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import GridCoverageError
from .gaussian_kl import Gaussian, tv_normal_1d
from .meanfield_vb import fit_vb
from .models import (
    Dataset,
    GlmmModel,
    GmmModel,
    Model,
    align_vector,
    coord_names,
    theta_vector,
)
from .optimize import fd_gradient, fd_hessian, newton_nd_max
from .quadrature import hermite_rule
from .vfe_em import (
    default_h_grid,
    delta_n_vector,
    fit_vfe,
    quadratic_lan_fit,
    theta_from_vector,
    variational_loglik,
)

DEFAULT_POINTS = 401
DEFAULT_HALFWIDTH_SDS = 10.0
BOUNDARY_MASS_LIMIT = 1e-4
NORMALIZATION_SLACK = 1e-6


@dataclass
class GridSpec:
    """Where to evaluate the ideal posterior.

    center and sds default to the VFE and the LAN-fitted curvature scales;
    axes restricts evaluation to a coordinate subset (used for the
    mixed-model variance slice, where the other coordinates are pinned at
    the VFE).
    """

    points: int = DEFAULT_POINTS
    halfwidth_sds: float = DEFAULT_HALFWIDTH_SDS
    center: np.ndarray = None
    sds: np.ndarray = None
    axes: tuple = None


@dataclass
class GridDensity:
    """Log density values on a uniform rectangular grid, d <= 2."""

    axes: tuple
    log_values: np.ndarray
    normalizer: float

    def __post_init__(self):
        self.axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        if not 1 <= len(self.axes) <= 2:
            raise ValueError("grids support one or two dimensions only")
        self.log_values = np.asarray(self.log_values, dtype=float)
        if self.log_values.shape != tuple(a.size for a in self.axes):
            raise ValueError("log_values shape does not match the axes")
        total = math.exp(logsumexp(self.log_values - self.normalizer)
                         + math.log(self.cell_volume))
        if abs(total - 1.0) > NORMALIZATION_SLACK:
            raise ValueError(f"normalization off by {total - 1.0:.3g}")

    @property
    def ndim(self) -> int:
        return len(self.axes)

    @property
    def cell_volume(self) -> float:
        vol = 1.0
        for a in self.axes:
            vol *= float(a[1] - a[0])
        return vol

    def density(self) -> np.ndarray:
        return np.exp(self.log_values - self.normalizer)

    def marginal(self, j: int):
        """Axis grid and marginal density along coordinate j."""
        dens = self.density()
        if self.ndim == 1:
            return self.axes[0], dens.copy()
        other = 1 - j
        step = float(self.axes[other][1] - self.axes[other][0])
        return self.axes[j], dens.sum(axis=other) * step

    def mode(self) -> np.ndarray:
        flat = int(np.argmax(self.log_values))
        idx = np.unravel_index(flat, self.log_values.shape)
        return np.array([self.axes[j][idx[j]] for j in range(self.ndim)])

    def marginal_tv_normal(self, j: int, mean: float, sd: float) -> float:
        """TV between marginal j and N(mean, sd^2), tails included."""
        from scipy.stats import norm

        grid, dens = self.marginal(j)
        step = float(grid[1] - grid[0])
        edges = np.concatenate([[grid[0] - 0.5 * step],
                                grid + 0.5 * step])
        cdf = norm.cdf(edges, loc=mean, scale=sd)
        normal_mass = np.diff(cdf)
        grid_mass = dens * step
        tail = float(cdf[0] + 1.0 - cdf[-1])
        return 0.5 * (float(np.abs(grid_mass - normal_mass).sum()) + tail)

    def interpolated_density(self, points: np.ndarray) -> np.ndarray:
        from scipy.interpolate import RegularGridInterpolator

        interp = RegularGridInterpolator(
            self.axes, self.log_values - self.normalizer,
            method="linear", bounds_error=False, fill_value=-np.inf)
        with np.errstate(over="ignore"):
            return np.exp(interp(points))

    def _shared_node_indices(self, fine: "GridDensity"):
        idx = []
        for a_c, a_f in zip(self.axes, fine.axes):
            span = float(a_c[-1] - a_c[0])
            pos = np.searchsorted(a_f, a_c)
            pos = np.clip(pos, 0, a_f.size - 1)
            left = np.clip(pos - 1, 0, a_f.size - 1)
            pick = np.where(np.abs(a_f[left] - a_c) < np.abs(a_f[pos] - a_c),
                            left, pos)
            if np.max(np.abs(a_f[pick] - a_c)) > 1e-9 * max(span, 1.0):
                return None
            idx.append(pick)
        return idx

    def tv_to(self, other: "GridDensity") -> float:
        """TV against another grid density on the same region.

        When one grid's nodes are a subset of the other's (as under 2x
        refinement) the densities are compared at the shared nodes, which
        measures resolution dependence of the normalized object itself.
        Otherwise the coarse density is interpolated, which adds error of
        the order of the squared grid step.
        """
        fine, coarse = (self, other)
        if other.log_values.size > self.log_values.size:
            fine, coarse = other, self
        shared = coarse._shared_node_indices(fine)
        if shared is not None:
            p_c = coarse.density()
            p_f = fine.density()[np.ix_(*shared)] if coarse.ndim == 2 \
                else fine.density()[shared[0]]
            return 0.5 * float(np.abs(p_c - p_f).sum()) * coarse.cell_volume
        mesh = np.meshgrid(*fine.axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=-1)
        p_f = fine.density().ravel()
        p_c = coarse.interpolated_density(pts)
        return 0.5 * float(np.abs(p_f - p_c).sum()) * fine.cell_volume

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            dens = self.density()
            if self.ndim == 1:
                w.writerow(["theta1", "density"])
                for a, v in zip(self.axes[0], dens):
                    w.writerow([repr(float(a)), repr(float(v))])
            else:
                w.writerow(["theta1", "theta2", "density"])
                for i, a in enumerate(self.axes[0]):
                    for j, b in enumerate(self.axes[1]):
                        w.writerow([repr(float(a)), repr(float(b)),
                                    repr(float(dens[i, j]))])


def grid_density_from_log_values(axes, log_values) -> GridDensity:
    """Normalize raw log values into a GridDensity, checking coverage."""
    axes = tuple(np.asarray(a, dtype=float) for a in axes)
    log_values = np.asarray(log_values, dtype=float)
    vol = 1.0
    for a in axes:
        vol *= float(a[1] - a[0])
    normalizer = float(logsumexp(log_values) + math.log(vol))
    dens_mass = np.exp(log_values - normalizer) * vol
    if len(axes) == 1:
        boundary = float(dens_mass[0] + dens_mass[-1])
    else:
        boundary = float(dens_mass[0, :].sum() + dens_mass[-1, :].sum()
                         + dens_mass[1:-1, 0].sum() + dens_mass[1:-1, -1].sum())
    if boundary > BOUNDARY_MASS_LIMIT:
        raise GridCoverageError(
            f"boundary mass {boundary:.3g} exceeds {BOUNDARY_MASS_LIMIT:g}; "
            "widen the grid")
    return GridDensity(axes, log_values, normalizer)


# ---------------------------------------------------------------------------
# evaluating log prior + M_n on grids


def _gmm_axis_loglik_1d(x: np.ndarray, axis: np.ndarray) -> np.ndarray:
    n = x.size
    sx = float(x.sum())
    sxx = float((x * x).sum())
    return (-0.5 * (sxx - 2.0 * axis * sx + n * axis * axis)
            - 0.5 * n * math.log(2.0 * math.pi))


def _gmm_grid_loglik_2d(x: np.ndarray, ax1: np.ndarray, ax2: np.ndarray):
    l1 = -0.5 * (x[:, None] - ax1[None, :]) ** 2
    l2 = -0.5 * (x[:, None] - ax2[None, :]) ** 2
    total = np.zeros((ax1.size, ax2.size))
    for i in range(x.size):
        total += np.logaddexp(l1[i][:, None], l2[i][None, :])
    total -= x.size * (math.log(2.0) + 0.5 * math.log(2.0 * math.pi))
    return total


def _log_prior_normal(vals: np.ndarray, sd: float) -> np.ndarray:
    return -0.5 * (vals / sd) ** 2 - math.log(sd) - 0.5 * math.log(2.0 * math.pi)


def _resolve_spec(model: Model, data: Dataset, grid_spec: GridSpec):
    spec = grid_spec if grid_spec is not None else GridSpec()
    vfe = fit_vfe(model, data)
    center_full = theta_vector(model, vfe.theta_hat, natural=True)
    free = spec.axes if spec.axes is not None else tuple(range(center_full.size))
    free = tuple(int(j) for j in free)
    if len(free) > 2:
        raise ValueError("grids support one or two dimensions only")
    if spec.sds is None:
        dn = delta_n_vector(model, data)
        h = default_h_grid(center_full.size)
        locs = None

        def m_n(vec):
            nonlocal locs
            val, locs = variational_loglik(
                model, theta_from_vector(model, vec, natural=True), data,
                init=locs)
            return val

        base = m_n(center_full)
        values = np.array([m_n(center_full + dn * hh) - base for hh in h])
        fit = quadratic_lan_fit(h, values)
        cov = np.linalg.inv(fit.v)
        sds_full = dn * np.sqrt(np.diag(cov))
    else:
        sds_full = np.asarray(spec.sds, dtype=float)
    center = center_full if spec.center is None else \
        np.asarray(spec.center, dtype=float)
    return spec, center, sds_full, free, vfe


def ideal_posterior(model: Model, data: Dataset,
                    grid_spec: GridSpec = None) -> GridDensity:
    """Prior times exp(M_n) on a grid around the point estimate.

    The grid is centered at the VFE with halfwidth a multiple of the
    curvature-implied standard deviations. The mixture evaluates M_n in
    closed form; the mixed-model variance slice re-optimizes the local
    factors at each node, warm started in traversal order. Raises when
    more than the allowed mass sits on the grid boundary.
    """
    spec, center, sds_full, free, _vfe = _resolve_spec(model, data, grid_spec)
    axes = []
    for j in free:
        lo = center[j] - spec.halfwidth_sds * sds_full[j]
        hi = center[j] + spec.halfwidth_sds * sds_full[j]
        if isinstance(model, GlmmModel) and j == center.size - 1:
            # the variance axis stays positive
            lo = max(lo, 1e-8)
        axes.append(np.linspace(lo, hi, spec.points))
    axes = tuple(axes)

    if isinstance(model, GmmModel):
        if len(free) != model.k:
            raise ValueError("mixture grids span all component means")
        x = np.asarray(data.x, dtype=float)
        if model.k == 1:
            logv = _gmm_axis_loglik_1d(x, axes[0]) \
                + _log_prior_normal(axes[0], model.prior_mean_sd)
        else:
            logv = _gmm_grid_loglik_2d(x, axes[0], axes[1])
            logv += _log_prior_normal(axes[0], model.prior_mean_sd)[:, None]
            logv += _log_prior_normal(axes[1], model.prior_mean_sd)[None, :]
        return grid_density_from_log_values(axes, logv)

    if isinstance(model, GlmmModel):
        last = center.size - 1
        if free != (last,):
            raise ValueError(
                "mixed-model grids support only the variance slice")
        logv = np.empty(spec.points)
        locs = None
        from .models import GlmmParams

        beta0 = float(center[0])
        beta1 = center[1:last].copy()
        for i, s2 in enumerate(axes[0]):
            if s2 <= 0:
                logv[i] = -np.inf
                continue
            theta = GlmmParams(beta0, beta1, float(s2))
            val, locs = variational_loglik(model, theta, data, init=locs)
            # prior on the log-variance coordinate, with the change of
            # variables to the natural axis
            t = math.log(s2)
            logv[i] = val + _log_prior_normal(
                np.array([t]), model.prior_log_sigma2_sd)[0] - t
        return grid_density_from_log_values(axes, logv)

    raise ValueError("ideal grids cover the mixture and the variance slice")


# ---------------------------------------------------------------------------
# projection


@dataclass
class ProjectionResult:
    gaussian: Gaussian
    kl_value: float
    multimodal_fit: bool
    evaluations: int

    @property
    def mean(self) -> np.ndarray:
        return self.gaussian.mean

    @property
    def sds(self) -> np.ndarray:
        return np.sqrt(np.diag(self.gaussian.cov))


def _grid_local_maxima(gd: GridDensity, rel_floor: float = 1e-3):
    lv = gd.log_values
    floor = lv.max() + math.log(rel_floor)
    if gd.ndim == 1:
        inner = lv[1:-1]
        hits = (inner > lv[:-2]) & (inner > lv[2:]) & (inner > floor)
        count = int(hits.sum())
        for end in (0, -1):
            neighbor = lv[1] if end == 0 else lv[-2]
            if lv[end] > neighbor and lv[end] > floor:
                count += 1
        return count
    core = lv[1:-1, 1:-1]
    hits = ((core > lv[:-2, 1:-1]) & (core > lv[2:, 1:-1])
            & (core > lv[1:-1, :-2]) & (core > lv[1:-1, 2:])
            & (core > floor))
    return int(hits.sum())


def kl_project_to_meanfield(pi_star: GridDensity,
                            family: str = "diagonal-gaussian",
                            init: tuple = None) -> ProjectionResult:
    """Closest diagonal Gaussian to the grid density in KL(q || pi*).

    Newton iteration on (means, log sds); the cross-entropy integral uses
    grid quadrature of the normalized log density. Initialization at the
    grid mode keeps the minimizer deterministic when the density is
    multimodal; the multimodal_fit flag reports that situation.
    """
    if family != "diagonal-gaussian":
        raise ValueError("only the diagonal Gaussian family is supported")
    d = pi_star.ndim
    log_dens = pi_star.log_values - pi_star.normalizer
    vol = pi_star.cell_volume
    mesh = np.meshgrid(*pi_star.axes, indexing="ij")

    if init is None:
        mode = pi_star.mode()
        sds0 = np.empty(d)
        for j in range(d):
            grid, dens = pi_star.marginal(j)
            step = grid[1] - grid[0]
            m1 = float((grid * dens).sum() * step)
            m2 = float((grid * grid * dens).sum() * step)
            sds0[j] = math.sqrt(max(m2 - m1 * m1, 1e-12))
        x0 = np.concatenate([mode, np.log(sds0)])
    else:
        means0, sds0 = init
        x0 = np.concatenate([np.asarray(means0, dtype=float),
                             np.log(np.asarray(sds0, dtype=float))])

    evals = [0]

    def value(p):
        evals[0] += 1
        means, sds = p[:d], np.exp(p[d:])
        logq = np.zeros_like(log_dens)
        for j in range(d):
            z = (mesh[j] - means[j]) / sds[j]
            logq = logq - 0.5 * z * z - math.log(sds[j]) \
                - 0.5 * math.log(2.0 * math.pi)
        q = np.exp(logq)
        kl = float((q * (logq - log_dens)).sum() * vol)
        return -kl

    def grad(p):
        return fd_gradient(value, p, 1e-5)

    def hess(p):
        return fd_hessian(value, p, 1e-4)

    x, best = newton_nd_max(value, grad, hess, x0)
    means, sds = x[:d], np.exp(x[d:])
    return ProjectionResult(Gaussian(means, np.diag(sds * sds)), -best,
                            _grid_local_maxima(pi_star) > 1, evals[0])


# ---------------------------------------------------------------------------
# gap report


@dataclass
class GapReport:
    n: int
    names: tuple
    vb_means: np.ndarray
    vb_sds: np.ndarray
    projection_means: np.ndarray
    projection_sds: np.ndarray
    marginal_tv: np.ndarray
    scalar_gap: float
    multimodal_fit: bool

    def to_dict(self) -> dict:
        return {
            "n": int(self.n), "names": list(self.names),
            "vb_means": [float(v) for v in self.vb_means],
            "vb_sds": [float(v) for v in self.vb_sds],
            "projection_means": [float(v) for v in self.projection_means],
            "projection_sds": [float(v) for v in self.projection_sds],
            "marginal_tv": [float(v) for v in self.marginal_tv],
            "scalar_gap": float(self.scalar_gap),
            "multimodal_fit": bool(self.multimodal_fit),
        }


def _gmm_elbo_p(model: GmmModel, data: Dataset, means, sds, nodes=None):
    """E_q[log prior + M_n] + H(q) by tensorized Gauss-Hermite."""
    z, w = hermite_rule() if nodes is None else nodes
    x = np.asarray(data.x, dtype=float)
    k = model.k
    pts = [means[j] + sds[j] * z for j in range(k)]
    if k == 1:
        vals = _gmm_axis_loglik_1d(x, pts[0]) \
            + _log_prior_normal(pts[0], model.prior_mean_sd)
        e_term = float(w @ vals)
    else:
        grid = _gmm_grid_loglik_2d(x, pts[0], pts[1])
        grid += _log_prior_normal(pts[0], model.prior_mean_sd)[:, None]
        grid += _log_prior_normal(pts[1], model.prior_mean_sd)[None, :]
        e_term = float(w @ grid @ w)
    ent = sum(0.5 * (1.0 + math.log(2.0 * math.pi)) + math.log(s) for s in sds)
    return e_term + ent


def ideal_vs_vb_gap(model: GmmModel, data: Dataset,
                    grid_spec: GridSpec = None) -> GapReport:
    """Distance between the fitted mean-field factors and the projected ideal.

    Reports per-marginal TV between the fitted factors (permutation aligned
    to the grid center) and the projection of the grid ideal, plus the
    scalar defect of ELBO_p(q) + KL(q || ideal) - log normalizer with each
    term computed by an independent quadrature route.
    """
    if not isinstance(model, GmmModel):
        raise ValueError("the gap diagnostic covers the mixture models")
    gd = ideal_posterior(model, data, grid_spec)
    proj = kl_project_to_meanfield(gd)

    vb = fit_vb(model, data)
    center = np.array([a[a.size // 2] for a in gd.axes]) if model.k > 1 else None
    means = vb.global_factors.means.copy()
    sds = vb.global_factors.sds.copy()
    if model.k > 1:
        aligned, perm = align_vector(model, means, center)
        means = aligned
        sds = sds[list(perm)]

    d = gd.ndim
    tvs = np.array([
        tv_normal_1d(float(means[j]), float(sds[j]),
                     float(proj.mean[j]), float(proj.sds[j]))
        for j in range(d)])

    elbo_p = _gmm_elbo_p(model, data, means, sds)
    log_dens = gd.log_values - gd.normalizer
    mesh = np.meshgrid(*gd.axes, indexing="ij")
    logq = np.zeros_like(log_dens)
    for j in range(d):
        z = (mesh[j] - means[j]) / sds[j]
        logq = logq - 0.5 * z * z - math.log(sds[j]) \
            - 0.5 * math.log(2.0 * math.pi)
    q = np.exp(logq)
    kl_q_ideal = float((q * (logq - log_dens)).sum() * gd.cell_volume)
    gap = abs(elbo_p + kl_q_ideal - gd.normalizer)

    names = tuple(coord_names(model)[j] for j in range(d)) \
        if model.k > 1 else (coord_names(model)[0],)
    return GapReport(data.size, names, means, sds, proj.mean.copy(),
                     proj.sds.copy(), tvs, gap, proj.multimodal_fit)
