"""Asymptotic predictions and empirical checks against them.

The prediction object bundles everything the limit theory supplies for one
model and truth: per-coordinate convergence rates, the curvature of the
variational log likelihood, the diagonal limiting precision of the
mean-field factors, and the sampling covariance of the point estimates.
The check functions compare replicated fits against these predictions and
emit uniform reports (JSON summary plus long-form CSV rows).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import EssTooLowError, MonteCarloError, SingularCurvatureError
from .gaussian_kl import tv_normal_1d
from .models import CovariateLaw, GlmmModel, GmmModel, coord_names
from .rng import TAG_CHECK, substream

SLOPE_BAND = 0.15


# ---------------------------------------------------------------------------
# prediction container


@dataclass
class AsymptoticPrediction:
    """Limit-theory quantities in the rescaled coordinates.

    curvature is the per-unit complete-data curvature at the optimal
    local factors (the envelope form used in the corollary derivations);
    this is what the coordinate-ascent fixed point exposes to each
    global factor, so v_prime keeps only its diagonal and is the
    limiting precision of the mean-field factors, with
    factor_cov = v_prime^{-1}. It coincides with the profile-objective
    curvature exactly when the locals are consistently estimable (the
    mixed model, or one mixture component); with fixed overlap the two
    differ, and the factors follow the envelope one. sampling_cov is the
    covariance of the rescaled estimation error (the sandwich built from
    the profile Hessian for the mixture, the corollary variances for the
    mixed model). rates(size) returns the per-coordinate delta_n.
    """

    names: tuple
    center: np.ndarray
    rates: object
    curvature: np.ndarray
    v_prime: np.ndarray = field(init=False)
    factor_cov: np.ndarray = field(init=False)
    sampling_cov: np.ndarray = None
    a: np.ndarray = None
    b: np.ndarray = None
    fd_relative_change: float = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.curvature = np.asarray(self.curvature, dtype=float)
        diag = np.diag(self.curvature)
        if np.any(diag <= 0):
            raise SingularCurvatureError("curvature diagonal is not positive")
        self.v_prime = np.diag(diag)
        self.factor_cov = np.diag(1.0 / diag)
        if self.sampling_cov is not None:
            self.sampling_cov = np.asarray(self.sampling_cov, dtype=float)

    @property
    def V(self) -> np.ndarray:
        return self.sampling_cov

    def delta_n(self, size) -> np.ndarray:
        return np.asarray(self.rates(size), dtype=float)


# ---------------------------------------------------------------------------
# GMM sandwich


def sandwich_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """A^{-1} B A^{-1} without forming an explicit inverse."""
    ainv_b = np.linalg.solve(a, b)
    return np.linalg.solve(a.T, ainv_b.T).T


def _mixture_logpdf_samples(x: np.ndarray, means: np.ndarray) -> np.ndarray:
    k = means.size
    z = x[:, None] - means[None, :]
    return -0.5 * z * z - 0.5 * math.log(2.0 * math.pi) - math.log(k)


def _per_sample_loglik(x, means):
    from scipy.special import logsumexp

    return logsumexp(_mixture_logpdf_samples(x, means), axis=1)


def _fd_score_hessian(x, means, h):
    """Per-sample central-difference gradient and Hessian of the mixture
    log density in the component means, averaged over the samples."""
    k = means.size
    base = _per_sample_loglik(x, means)
    plus = np.empty((k, x.size))
    minus = np.empty((k, x.size))
    for i in range(k):
        e = np.zeros(k)
        e[i] = h
        plus[i] = _per_sample_loglik(x, means + e)
        minus[i] = _per_sample_loglik(x, means - e)
    score = (plus - minus) / (2.0 * h)  # (k, samples)

    hess = np.empty((k, k, x.size))
    for i in range(k):
        hess[i, i] = (plus[i] - 2.0 * base + minus[i]) / (h * h)
        for j in range(i + 1, k):
            ei = np.zeros(k)
            ej = np.zeros(k)
            ei[i] = h
            ej[j] = h
            pp = _per_sample_loglik(x, means + ei + ej)
            pm = _per_sample_loglik(x, means + ei - ej)
            mp = _per_sample_loglik(x, means - ei + ej)
            mm = _per_sample_loglik(x, means - ei - ej)
            hess[i, j] = hess[j, i] = (pp - pm - mp + mm) / (4.0 * h * h)
    return score, hess


def _mc_mean_with_se(samples_last_axis: np.ndarray):
    mean = samples_last_axis.mean(axis=-1)
    se = samples_last_axis.std(axis=-1, ddof=1) / math.sqrt(samples_last_axis.shape[-1])
    return mean, se


def gmm_sandwich(model: GmmModel, theta0, mc_samples: int = 20000,
                 fd_step: float = 1e-4, seed: int = 0) -> AsymptoticPrediction:
    """Monte Carlo estimate of the mixture information matrices.

    Estimates A = -E[Hessian of the per-datum log mixture density] and
    B = E[score score'] by central finite differences over draws from the
    truth, then assembles the sampling covariance A^{-1} B A^{-1}. The
    Hessian uses Richardson extrapolation from steps fd_step and
    fd_step/2; the relative change between the two is recorded and the
    scores come from the finer step.

    The curvature passed to the prediction is the complete-data one at
    the optimal responsibilities, diag(E[r_j]) / sigma^2 = I/k for equal
    weights and unit variance: each factor's precision grows like n/k no
    matter how the components overlap, because the coordinate update
    only ever sees its own soft counts. A and B stay available in the
    a and b fields; for one component all three matrices agree.
    """
    from .models import as_gmm_means

    if mc_samples < 10**4:
        raise ValueError("mc_samples must be at least 10^4")
    if fd_step <= 0:
        raise ValueError("fd_step must be positive")
    means = as_gmm_means(theta0)
    k = means.size
    rng = substream(seed, TAG_CHECK, mc_samples)
    comps = rng.integers(0, k, size=mc_samples)
    x = means[comps] + rng.standard_normal(mc_samples)

    _, hess_h = _fd_score_hessian(x, means, fd_step)
    score, hess_h2 = _fd_score_hessian(x, means, 0.5 * fd_step)

    a_h = -hess_h.mean(axis=-1)
    a_h2, a_se = _mc_mean_with_se(-hess_h2)
    a = (4.0 * a_h2 - a_h) / 3.0
    scale = float(np.max(np.abs(a)))
    rel_change = float(np.max(np.abs(a_h2 - a_h))) / scale

    outer = score[:, None, :] * score[None, :, :]
    b, b_se = _mc_mean_with_se(outer)

    if np.any(a_se > 0.05 * scale) or np.any(b_se > 0.05 * float(np.max(np.abs(b)))):
        raise MonteCarloError(
            "standard error above 5% of the matrix scale; raise mc_samples")
    sign, logdet = np.linalg.slogdet(a)
    if sign <= 0 or np.linalg.cond(a) > 1e10:
        raise SingularCurvatureError("estimated A is singular or indefinite")

    v = sandwich_matrix(a, b)
    names = coord_names(model)
    envelope = np.diag(np.full(k, 1.0 / k))
    return AsymptoticPrediction(
        names=tuple(names), center=means,
        rates=lambda n: np.full(k, float(n) ** -0.5),
        curvature=envelope, sampling_cov=v, a=a, b=b,
        fd_relative_change=rel_change)


# ---------------------------------------------------------------------------
# GLMM corollary formulas


def _mgf_derivatives(law, t: float):
    if not isinstance(law, CovariateLaw):
        law = CovariateLaw(*law)
    if law.kind == "normal":
        s2 = law.param ** 2
        phi = math.exp(0.5 * t * t * s2)
        return phi, t * s2 * phi, (s2 + t * t * s2 * s2) * phi
    if law.kind == "bernoulli":
        p = law.param
        pe = p * math.exp(t)
        return 1.0 - p + pe, pe, pe
    raise ValueError(f"unsupported covariate law {law.kind!r}")


def glmm_predicted_vars(beta0: float, beta1, sigma2: float, covariate_law):
    """Closed-form limit variances for the Poisson mixed model.

    Scalar-covariate expressions applied per coordinate; with independent
    covariates, the others enter coordinate k only through the mean
    exp(beta1_r X_r), folding their mgf values into an effective intercept.
    Returns {V1, V2, V3, tau2, var_Z1, var_Z2, var_Z3} where V are the
    rescaled factor variances and the Z are the rescaled estimation errors.
    """
    beta1 = np.atleast_1d(np.asarray(beta1, dtype=float))
    laws = list(covariate_law)
    if len(laws) != beta1.size:
        raise ValueError("one covariate law per slope coordinate")
    trips = [_mgf_derivatives(law, float(t)) for law, t in zip(laws, beta1)]
    phis = np.array([t[0] for t in trips])
    dphis = np.array([t[1] for t in trips])
    d2phis = np.array([t[2] for t in trips])
    if np.any(phis <= 0):
        raise ValueError("mgf must be positive")
    phi_prod = float(np.prod(phis))

    v1 = math.exp(-beta0 + 0.5 * sigma2) / phi_prod
    v3 = 2.0 * sigma2 * sigma2
    v2 = np.empty(beta1.size)
    tau2 = np.empty(beta1.size)
    for j in range(beta1.size):
        eff = beta0 + math.log(phi_prod / phis[j])
        v2[j] = math.exp(-eff + 0.5 * sigma2) / d2phis[j]
        tau2[j] = (math.exp(-0.5 * sigma2 - eff) * phis[j]
                   / (d2phis[j] * phis[j] - dphis[j] ** 2))
    return {
        "V1": v1, "V2": v2, "V3": v3, "tau2": tau2,
        "var_Z1": float(sigma2), "var_Z2": tau2.copy(),
        "var_Z3": 2.0 * sigma2 * sigma2,
    }


def glmm_asymptotic_prediction(model: GlmmModel, theta0) -> AsymptoticPrediction:
    """Bundle the corollary variances for the given mixed-model truth."""
    pred = glmm_predicted_vars(theta0.beta0, theta0.beta1, theta0.sigma2,
                               model.covariates)
    d = model.n_covariates
    n = model.group_size
    factor_vars = np.concatenate([[pred["V1"]], pred["V2"], [pred["V3"]]])
    samp_vars = np.concatenate([[pred["var_Z1"]], pred["var_Z2"],
                                [pred["var_Z3"]]])
    names = coord_names(model, natural=True)
    center = np.concatenate([[theta0.beta0], theta0.beta1, [theta0.sigma2]])

    def rates(m):
        return np.array([m ** -0.5] + [(m * n) ** -0.5] * d + [m ** -0.5])

    return AsymptoticPrediction(
        names=tuple(names), center=center, rates=rates,
        curvature=np.diag(1.0 / factor_vars), sampling_cov=np.diag(samp_vars))


# ---------------------------------------------------------------------------
# report container


@dataclass
class CheckReport:
    check: str
    coordinates: tuple
    statistics: dict
    band: dict
    passed: bool
    long_rows: list  # (n, rep, coord, value)

    def to_json_dict(self) -> dict:
        return {"check": self.check, "coordinates": list(self.coordinates),
                "statistics": self.statistics, "band": self.band,
                "pass": bool(self.passed)}

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "rep", "coord", "value"])
            for n, rep, coord, value in self.long_rows:
                w.writerow([n, rep, coord, repr(float(value))])


def _ols_loglog(sizes: np.ndarray, values: np.ndarray):
    """Slope and standard error of log(values) on log(sizes)."""
    lx = np.log(np.asarray(sizes, dtype=float))
    ly = np.log(np.asarray(values, dtype=float))
    xbar = lx.mean()
    sxx = float(((lx - xbar) ** 2).sum())
    slope = float(((lx - xbar) * (ly - ly.mean())).sum() / sxx)
    inter = float(ly.mean() - slope * xbar)
    resid = ly - (inter + slope * lx)
    dof = max(len(lx) - 2, 1)
    se = math.sqrt(float((resid**2).sum()) / dof / sxx)
    return slope, se, inter


# ---------------------------------------------------------------------------
# consistency


def consistency_check(estimates: dict, theta0, n_list=None, *,
                      expected_slope=-0.5, band: float = SLOPE_BAND,
                      min_sizes: int = 4, min_reps: int = 50,
                      names=None) -> CheckReport:
    """Rate check on pre-aligned replicated estimates.

    estimates maps size -> (reps, d) arrays of estimate vectors, already
    permutation aligned where the model requires it. Reports per-coordinate
    RMSE against size and the OLS slope of log RMSE on log size, passing
    when every slope lies within band of its expected value.
    """
    theta0 = np.asarray(theta0, dtype=float)
    sizes = sorted(estimates) if n_list is None else sorted(n_list)
    if len(set(sizes)) < min_sizes:
        raise ValueError(f"need at least {min_sizes} distinct sizes")
    mats = {n: np.asarray(estimates[n], dtype=float) for n in sizes}
    for n, mat in mats.items():
        if mat.shape[0] < min_reps:
            raise ValueError(f"need at least {min_reps} replications at size {n}")
    d = theta0.size
    if names is None:
        names = tuple(f"coord{j + 1}" for j in range(d))
    expected = np.broadcast_to(np.asarray(expected_slope, dtype=float), (d,))

    rmse = np.array([[math.sqrt(float(np.mean((mats[n][:, j] - theta0[j]) ** 2)))
                      for j in range(d)] for n in sizes])  # (sizes, d)
    slopes, ses = np.empty(d), np.empty(d)
    for j in range(d):
        slopes[j], ses[j], _ = _ols_loglog(np.array(sizes), rmse[:, j])
    ok = np.abs(slopes - expected) <= band

    rows = []
    for i, n in enumerate(sizes):
        for rep in range(mats[n].shape[0]):
            for j in range(d):
                rows.append((n, rep, names[j],
                             float(mats[n][rep, j] - theta0[j])))
    stats_d = {
        "sizes": [int(n) for n in sizes],
        "rmse": {names[j]: [float(r) for r in rmse[:, j]] for j in range(d)},
        "slope": {names[j]: float(slopes[j]) for j in range(d)},
        "slope_se": {names[j]: float(ses[j]) for j in range(d)},
    }
    band_d = {"expected_slope": {names[j]: float(expected[j]) for j in range(d)},
              "halfwidth": float(band)}
    return CheckReport("consistency", tuple(names), stats_d, band_d,
                       bool(np.all(ok)), rows)


# ---------------------------------------------------------------------------
# normality


@dataclass
class FittedPair:
    """One replication's fitted factors plus the point-estimate companion."""

    n: int
    vb_means: np.ndarray
    vb_sds: np.ndarray
    vfe: np.ndarray


def normality_check(fitted, prediction: AsymptoticPrediction, theta0,
                    ad_level: str = "1%", min_reps: int = 100) -> CheckReport:
    """Compare replicated fits with the limiting normal prediction.

    Within replications: per-marginal TV between the rescaled fitted factor
    and N(delta_hat, factor_cov), with delta_hat the rescaled point-estimate
    error; the VFE companion supplies it. Across replications: Anderson
    Darling normality of the rescaled VB means per coordinate, and the
    sample variance against the predicted sampling variance.
    """
    theta0 = np.asarray(theta0, dtype=float)
    fits = [f if isinstance(f, FittedPair) else FittedPair(*f) for f in fitted]
    if any(f.vfe is None for f in fits):
        raise ValueError("normality check needs the point-estimate companion fits")
    sizes = sorted({f.n for f in fits})
    names = prediction.names
    d = theta0.size
    fac_sd = np.sqrt(np.diag(prediction.factor_cov))
    samp_var = np.diag(prediction.sampling_cov)

    counts = {n: sum(f.n == n for f in fits) for n in sizes}
    if max(counts.values()) < min_reps:
        raise ValueError(f"need at least {min_reps} replications at one size")

    rows = []
    median_tv = {}
    ad_stat = {}
    ad_ok = {}
    var_ratio = {}
    crit_index = {"15%": 0, "10%": 1, "5%": 2, "2.5%": 3, "1%": 4}[ad_level]
    for n in sizes:
        group = [f for f in fits if f.n == n]
        dn = prediction.delta_n(n)
        tvs = np.empty((len(group), d))
        centered = np.empty((len(group), d))
        for r, f in enumerate(group):
            delta_hat = (np.asarray(f.vfe) - theta0) / dn
            m_r = (np.asarray(f.vb_means) - theta0) / dn
            s_r = np.asarray(f.vb_sds) / dn
            centered[r] = (np.asarray(f.vb_means) - theta0) / dn
            for j in range(d):
                tvs[r, j] = tv_normal_1d(m_r[j], s_r[j],
                                         delta_hat[j], fac_sd[j])
                rows.append((n, r, names[j], float(tvs[r, j])))
        median_tv[n] = np.median(tvs, axis=0)
        stats_n = np.empty(d)
        ok_n = np.zeros(d, dtype=bool)
        for j in range(d):
            res = stats.anderson(centered[:, j], dist="norm")
            stats_n[j] = res.statistic
            ok_n[j] = res.statistic < res.critical_values[crit_index]
        ad_stat[n] = stats_n
        ad_ok[n] = ok_n
        var_ratio[n] = centered.var(axis=0, ddof=1) / samp_var

    stats_d = {
        "sizes": [int(n) for n in sizes],
        "median_tv": {names[j]: [float(median_tv[n][j]) for n in sizes]
                      for j in range(d)},
        "ad_statistic": {names[j]: [float(ad_stat[n][j]) for n in sizes]
                         for j in range(d)},
        "ad_pass": {names[j]: [bool(ad_ok[n][j]) for n in sizes]
                    for j in range(d)},
        "ad_pass_fraction": [float(np.mean(ad_ok[n])) for n in sizes],
        "var_ratio": {names[j]: [float(var_ratio[n][j]) for n in sizes]
                      for j in range(d)},
    }
    tv_decreasing = all(
        np.all(median_tv[sizes[i + 1]] <= median_tv[sizes[i]])
        for i in range(len(sizes) - 1)) if len(sizes) > 1 else True
    passed = tv_decreasing and bool(np.mean(ad_ok[sizes[-1]]) >= 0.9)
    band_d = {"ad_level": ad_level, "ad_pass_fraction_min": 0.9}
    return CheckReport("normality", tuple(names), stats_d, band_d, passed, rows)


# ---------------------------------------------------------------------------
# underdispersion


def underdispersion_check(vb, reference, min_effective: float = 1000.0,
                          names=None) -> CheckReport:
    """Per-coordinate variance ratio of the mean-field fit to a reference.

    vb supplies marginal variances (a fit result with .global_factors, a
    (means, sds) pair, or an sd vector). reference is either posterior
    draws ((draws, ess) or an object with .draws and .ess) or a
    full-covariance Gaussian ((mean, cov) pair). Reports ratios, the
    fraction of coordinates at or below one, and for a Gaussian reference
    the entropy comparison.
    """
    if hasattr(vb, "global_factors"):
        sds = np.asarray(vb.global_factors.sds, dtype=float)
        if names is None:
            names = tuple(vb.global_factors.names)
    elif isinstance(vb, tuple) and len(vb) == 2:
        sds = np.asarray(vb[1], dtype=float)
    else:
        sds = np.asarray(vb, dtype=float)
    vb_var = sds * sds
    d = vb_var.size
    if names is None:
        names = tuple(f"coord{j + 1}" for j in range(d))

    entropy_gap = None
    if hasattr(reference, "draws"):
        draws = np.asarray(reference.draws, dtype=float)
        ess = np.asarray(getattr(reference, "ess"), dtype=float)
        if float(np.min(ess)) < min_effective:
            raise EssTooLowError(
                f"reference effective sample size {float(np.min(ess)):.0f} "
                f"below {min_effective:.0f}")
        ref_var = draws.var(axis=0, ddof=1)
    elif isinstance(reference, tuple) and np.asarray(reference[1]).ndim == 2:
        cov = np.asarray(reference[1], dtype=float)
        ref_var = np.diag(cov).copy()
        sign, logdet = np.linalg.slogdet(cov)
        if sign <= 0:
            raise ValueError("reference covariance must be positive definite")
        ref_entropy = 0.5 * (d * (1.0 + math.log(2.0 * math.pi)) + logdet)
        vb_entropy = 0.5 * d * (1.0 + math.log(2.0 * math.pi)) \
            + float(np.log(sds).sum())
        entropy_gap = vb_entropy - ref_entropy
    else:
        draws = np.asarray(reference, dtype=float)
        if draws.ndim != 2 or draws.shape[0] < min_effective:
            raise ValueError("reference draws too few for a variance estimate")
        ref_var = draws.var(axis=0, ddof=1)

    ratios = vb_var / ref_var
    rows = [(0, 0, names[j], float(ratios[j])) for j in range(d)]
    stats_d = {
        "ratio": {names[j]: float(ratios[j]) for j in range(d)},
        "fraction_at_most_one": float(np.mean(ratios <= 1.0 + 1e-12)),
    }
    if entropy_gap is not None:
        stats_d["entropy_gap"] = float(entropy_gap)
    passed = bool(np.all(ratios <= 1.0 + 1e-9)) if entropy_gap is None \
        else bool(entropy_gap <= 1e-9)
    return CheckReport("underdispersion", tuple(names), stats_d,
                       {"ratio_max": 1.0}, passed, rows)


# ---------------------------------------------------------------------------
# GLMM rate separation


def rate_separation_glmm(results: dict, group_size: int, theta0,
                         prediction: AsymptoticPrediction = None,
                         band: float = 0.2, level_band: float = 0.3,
                         names=None) -> CheckReport:
    """Flatness of rescaled-error variances across group counts.

    results maps m -> (reps, d) natural-coordinate estimates ordered
    (intercept, slopes, variance). Errors are rescaled by sqrt(m) for the
    intercept and variance and sqrt(m n) for slopes; across-replication
    variances should be flat in m (log-log slope within band of zero) and,
    when a prediction is given, match its sampling variances within
    level_band at the largest m.
    """
    theta0 = np.asarray(theta0, dtype=float)
    sizes = sorted(results)
    if len(sizes) < 2:
        raise ValueError("need at least two group counts")
    if max(sizes) < 16 * min(sizes):
        raise ValueError("group counts must span at least a factor of 16")
    d = theta0.size
    if names is None:
        names = tuple(["beta0"] + [f"beta1_{j}" for j in range(1, d - 1)]
                      + ["sigma2"])
    rate_of = lambda m: np.array([math.sqrt(m)] + [math.sqrt(m * group_size)]
                                 * (d - 2) + [math.sqrt(m)])

    rows = []
    var_mat = np.empty((len(sizes), d))
    for i, m in enumerate(sizes):
        mat = np.asarray(results[m], dtype=float)
        z = (mat - theta0) * rate_of(m)
        var_mat[i] = z.var(axis=0, ddof=1)
        for rep in range(mat.shape[0]):
            for j in range(d):
                rows.append((m, rep, names[j], float(z[rep, j])))

    slopes, ses = np.empty(d), np.empty(d)
    for j in range(d):
        slopes[j], ses[j], _ = _ols_loglog(np.array(sizes), var_mat[:, j])
    ok = np.abs(slopes) <= band

    stats_d = {
        "sizes": [int(m) for m in sizes],
        "rescaled_variance": {names[j]: [float(v) for v in var_mat[:, j]]
                              for j in range(d)},
        "slope": {names[j]: float(slopes[j]) for j in range(d)},
        "slope_se": {names[j]: float(ses[j]) for j in range(d)},
    }
    level_ok = True
    if prediction is not None:
        target = np.diag(prediction.sampling_cov)
        ratio = var_mat[-1] / target
        stats_d["level_ratio"] = {names[j]: float(ratio[j]) for j in range(d)}
        level_ok = bool(np.all(np.abs(ratio[1:d - 1] - 1.0) <= level_band))
    band_d = {"slope_halfwidth": float(band), "level_halfwidth": float(level_band)}
    return CheckReport("rate_separation", tuple(names), stats_d, band_d,
                       bool(np.all(ok)) and level_ok, rows)
