"""Metropolis-within-Gibbs reference sampler for the exact posteriors.

Discrete or conjugate local variables are Gibbs updated (mixture
assignments, component means, block memberships); everything else moves by
random-walk Metropolis on an unconstrained scale. Proposal scales adapt
toward a target acceptance rate during burn-in only, so the kept samples
come from a fixed kernel with the posterior as invariant law. Chains are
deterministic functions of the seed.

The mixed-model chain keeps running sufficient statistics (per-group rate
masses and random-effect moments), which makes the intercept, variance,
and recentering moves constant-time; only the slope block touches the full
design. A translation move that shifts mass between the intercept and the
random effects breaks their posterior coupling.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import EssTooLowError
from .models import (
    Dataset,
    GlmmModel,
    GmmModel,
    Model,
    SbmModel,
    component_permutations,
    coord_names,
    permute_vector,
)
from .models import glmm as glmm_math
from .models import sbm as sbm_math
from .rng import TAG_CHAIN, substream

ADAPT_TARGET = 0.35
ADAPT_DECAY = 0.6
ACCEPT_BAND = (0.1, 0.7)
MIN_SUMMARY_KEPT = 1000
MIN_SUMMARY_ESS = 100.0
LOCAL_DRAW_LIMIT = 100
QUANTILE_LEVELS = (5, 25, 50, 75, 95)


@dataclass
class ChainConfig:
    steps: int
    burn_in: int = 0
    thin: int = 1
    proposal_sds: np.ndarray = None
    seed: int = 0

    def __post_init__(self):
        if not self.steps > self.burn_in >= 0:
            raise ValueError("need steps > burn_in >= 0")
        if self.thin < 1:
            raise ValueError("thin must be at least 1")
        if self.proposal_sds is not None:
            sds = np.atleast_1d(np.asarray(self.proposal_sds, dtype=float))
            if not np.all(sds > 0):
                raise ValueError("proposal sds must be positive")
            self.proposal_sds = sds

    @property
    def kept(self) -> int:
        return (self.steps - self.burn_in - 1) // self.thin + 1

    def scales(self, d: int, default: float = 0.2) -> np.ndarray:
        if self.proposal_sds is None:
            return np.full(d, default)
        if self.proposal_sds.size == 1:
            return np.full(d, float(self.proposal_sds[0]))
        if self.proposal_sds.size != d:
            raise ValueError(f"expected {d} proposal sds, "
                             f"got {self.proposal_sds.size}")
        return self.proposal_sds.copy()


@dataclass
class ChainOutput:
    draws: np.ndarray
    acceptance_rates: np.ndarray
    ess: np.ndarray
    names: tuple = ()
    model: object = None
    local_draws: np.ndarray = None
    warnings: tuple = ()

    def __post_init__(self):
        self.draws = np.asarray(self.draws, dtype=float)
        self.acceptance_rates = np.asarray(self.acceptance_rates, dtype=float)
        self.ess = np.asarray(self.ess, dtype=float)
        if self.draws.ndim != 2:
            raise ValueError("draws must be kept x coordinates")
        if np.any(self.acceptance_rates < 0) or np.any(self.acceptance_rates > 1):
            raise ValueError("acceptance rates live in [0, 1]")
        if np.any(self.ess > self.draws.shape[0] + 1e-9):
            raise ValueError("effective sample size cannot exceed kept draws")

    @property
    def kept(self) -> int:
        return self.draws.shape[0]

    def save_csv(self, path) -> None:
        names = self.names if self.names else \
            tuple(f"coord{j + 1}" for j in range(self.draws.shape[1]))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for row in self.draws:
                w.writerow([repr(float(v)) for v in row])


def metropolis_accept(rng: np.random.Generator, log_ratio: float) -> bool:
    """One Metropolis accept decision; always consumes one uniform."""
    u = rng.random()
    if log_ratio >= 0.0:
        return True
    return math.log(u) < log_ratio


def _rm_step(log_scale: float, accepted: float, t: int) -> float:
    gamma = (t + 1.0) ** -ADAPT_DECAY
    return log_scale + gamma * (accepted - ADAPT_TARGET)


def ess(draws) -> np.ndarray:
    """Effective sample sizes by the initial monotone sequence estimator.

    Autocovariances come from one FFT per coordinate; adjacent-lag pairs
    are truncated at the first non-positive pair and forced non-increasing
    before summing. A numerically constant coordinate counts as perfectly
    mixed. Results are clipped to the number of draws.
    """
    x = np.asarray(draws, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[:, None]
    n, d = x.shape
    out = np.empty(d)
    for j in range(d):
        v = x[:, j] - x[:, j].mean()
        g0 = float(v @ v) / n
        scale = max(1.0, float(np.abs(x[:, j]).max()) ** 2)
        if n < 4 or g0 <= 1e-30 * scale:
            out[j] = float(n)
            continue
        size = 1 << (2 * n - 1).bit_length()
        f = np.fft.rfft(v, size)
        acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
        pairs = acov[: (n // 2) * 2].reshape(-1, 2).sum(axis=1)
        tau = -acov[0]
        running = np.inf
        for p in pairs:
            if p <= 0.0:
                break
            running = min(running, p)
            tau += 2.0 * running
        out[j] = min(float(n), n * acov[0] / tau) if tau > 0 else float(n)
    return out[0] if single else out


def random_walk_metropolis(log_density, x0, config: ChainConfig,
                           names: tuple = ()) -> ChainOutput:
    """Coordinate-wise random-walk Metropolis on a raw log density."""
    rng = substream(config.seed, TAG_CHAIN)
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    d = x.size
    log_scales = np.log(config.scales(d, default=1.0))
    fx = float(log_density(x))
    if not np.isfinite(fx):
        raise ValueError("log density not finite at the starting point")
    kept = np.empty((config.kept, d))
    accepted = np.zeros(d)
    proposals = np.zeros(d)
    row = 0
    for step in range(config.steps):
        adapting = step < config.burn_in
        for j in range(d):
            prop = x.copy()
            prop[j] += math.exp(log_scales[j]) * rng.standard_normal()
            fp = float(log_density(prop))
            ok = np.isfinite(fp) and metropolis_accept(rng, fp - fx)
            if ok:
                x, fx = prop, fp
            if adapting:
                log_scales[j] = _rm_step(log_scales[j], float(ok), step)
            else:
                proposals[j] += 1
                accepted[j] += float(ok)
        if step >= config.burn_in and (step - config.burn_in) % config.thin == 0:
            kept[row] = x
            row += 1
    rates = np.divide(accepted, proposals, out=np.ones(d),
                      where=proposals > 0)
    warnings = tuple(
        f"coordinate {j} acceptance {rates[j]:.3f} outside "
        f"[{ACCEPT_BAND[0]}, {ACCEPT_BAND[1]}]"
        for j in range(d)
        if not ACCEPT_BAND[0] <= rates[j] <= ACCEPT_BAND[1])
    return ChainOutput(kept, rates, ess(kept).reshape(-1), names=tuple(names),
                       warnings=warnings)


# ---------------------------------------------------------------------------
# model-specific chains


def _categorical_rows(rng, logits):
    """One draw per row from unnormalized log probabilities."""
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    u = rng.random(logits.shape[0])
    return (u[:, None] > np.cumsum(p, axis=1)).sum(axis=1)


def _gmm_chain(model: GmmModel, data: Dataset, config: ChainConfig):
    rng = substream(config.seed, TAG_CHAIN)
    x = np.asarray(data.x, dtype=float)
    n, k = x.size, model.k
    prior_prec = model.prior_mean_sd ** -2
    # quantile start mirrors the deterministic fits
    mu = np.quantile(x, [(j + 1.0) / (k + 1.0) for j in range(k)]) \
        if n else np.zeros(k)
    keep_locals = n <= LOCAL_DRAW_LIMIT
    kept = np.empty((config.kept, k))
    locals_kept = np.empty((config.kept, n), dtype=np.int64) \
        if keep_locals else None
    row = 0
    for step in range(config.steps):
        logits = -0.5 * (x[:, None] - mu[None, :]) ** 2
        c = _categorical_rows(rng, logits)
        counts = np.bincount(c, minlength=k).astype(float)
        sums = np.bincount(c, weights=x, minlength=k)
        prec = counts + prior_prec
        mu = sums / prec + rng.standard_normal(k) / np.sqrt(prec)
        if step >= config.burn_in and (step - config.burn_in) % config.thin == 0:
            kept[row] = mu
            if keep_locals:
                locals_kept[row] = c
            row += 1
    return ChainOutput(kept, np.ones(k), ess(kept).reshape(-1),
                       names=tuple(coord_names(model)), model=model,
                       local_draws=locals_kept)


def _glmm_chain(model: GlmmModel, data: Dataset, config: ChainConfig):
    rng = substream(config.seed, TAG_CHAIN)
    y = np.asarray(data.y, dtype=float)
    xdes = np.asarray(data.x, dtype=float)
    m, _n = y.shape
    d = model.n_covariates
    ysum = y.sum(axis=1)
    ytot = float(ysum.sum())
    loc_var = model.prior_loc_sd ** 2
    t_var = model.prior_log_sigma2_sd ** 2

    beta0 = math.log(ysum.mean() / model.group_size + 1e-3)
    beta1 = np.zeros(d)
    t = 0.0
    u = np.zeros(m)
    fixed = glmm_math.cell_eta(xdes, beta0, beta1)
    b = np.exp(fixed).sum(axis=1)
    ru = np.exp(u)
    # slope proposals move along centered covariates (the intercept absorbs
    # the mean shift), which removes the dominant posterior correlation
    xbar = xdes.mean(axis=(0, 1))
    xcent = xdes - xbar[None, None, :]

    global_scales = config.scales(d + 2, default=0.1)
    log_s_u = np.full(m, math.log(0.5))
    log_s_c = math.log(0.2)
    log_s0 = math.log(global_scales[0])
    log_s1 = np.log(global_scales[1: d + 1])
    log_st = math.log(global_scales[d + 1])

    keep_locals = m <= LOCAL_DRAW_LIMIT
    kept = np.empty((config.kept, d + 2))
    locals_kept = np.empty((config.kept, m)) if keep_locals else None
    acc = np.zeros(d + 2)
    nprop = 0
    acc_u = 0.0
    nprop_u = 0
    row = 0

    for step in range(config.steps):
        adapting = step < config.burn_in
        sigma2 = math.exp(t)

        # random effects, all groups at once, two sweeps per cycle
        for _ in range(2):
            delta = np.exp(log_s_u) * rng.standard_normal(m)
            log_ratio = (ysum * delta - b * ru * np.expm1(delta)
                         - (2.0 * u * delta + delta * delta) / (2.0 * sigma2))
            take = np.log(rng.random(m)) < log_ratio
            u = u + delta * take
            ru = np.exp(u)
            if adapting:
                gamma = (step + 1.0) ** -ADAPT_DECAY
                log_s_u = log_s_u + gamma * (take - ADAPT_TARGET)
            else:
                acc_u += float(take.sum())
                nprop_u += m

        # translation between the intercept and the random effects
        shift = math.exp(log_s_c) * rng.standard_normal()
        su = float(u.sum())
        lr = ((2.0 * shift * su - m * shift * shift) / (2.0 * sigma2)
              + (beta0 ** 2 - (beta0 + shift) ** 2) / (2.0 * loc_var))
        if metropolis_accept(rng, lr):
            u = u - shift
            ru = np.exp(u)
            beta0 += shift
            fixed = fixed + shift
            b = b * math.exp(shift)
            ok_c = 1.0
        else:
            ok_c = 0.0
        if adapting:
            log_s_c = _rm_step(log_s_c, ok_c, step)

        # intercept
        delta0 = math.exp(log_s0) * rng.standard_normal()
        lr = (delta0 * ytot - math.expm1(delta0) * float(b @ ru)
              + (beta0 ** 2 - (beta0 + delta0) ** 2) / (2.0 * loc_var))
        ok0 = metropolis_accept(rng, lr)
        if ok0:
            beta0 += delta0
            fixed = fixed + delta0
            b = b * math.exp(delta0)
        if adapting:
            log_s0 = _rm_step(log_s0, float(ok0), step)

        # slopes, one coordinate at a time
        ok1 = np.zeros(d)
        for j in range(d):
            dj = math.exp(log_s1[j]) * rng.standard_normal()
            deta = xcent[:, :, j] * dj
            fixed_new = fixed + deta
            with np.errstate(over="ignore"):
                b_new = np.exp(fixed_new).sum(axis=1)
            b0_new = beta0 - dj * xbar[j]
            lr = (float(np.sum(y * deta)) + float((b - b_new) @ ru)
                  + (beta1[j] ** 2 - (beta1[j] + dj) ** 2
                     + beta0 ** 2 - b0_new ** 2) / (2.0 * loc_var))
            if metropolis_accept(rng, lr):
                beta1[j] += dj
                beta0 = b0_new
                fixed = fixed_new
                b = b_new
                ok1[j] = 1.0
            if adapting:
                log_s1[j] = _rm_step(log_s1[j], ok1[j], step)

        # log variance
        dt = math.exp(log_st) * rng.standard_normal()
        uu = float(u @ u)
        lr = (-0.5 * m * dt - 0.5 * uu * (math.exp(-t - dt) - math.exp(-t))
              + (t ** 2 - (t + dt) ** 2) / (2.0 * t_var))
        okt = metropolis_accept(rng, lr)
        if okt:
            t += dt
        if adapting:
            log_st = _rm_step(log_st, float(okt), step)

        if not adapting:
            acc += np.concatenate([[float(ok0)], ok1, [float(okt)]])
            nprop += 1
        if step >= config.burn_in and (step - config.burn_in) % config.thin == 0:
            kept[row, 0] = beta0
            kept[row, 1: d + 1] = beta1
            kept[row, d + 1] = t
            if keep_locals:
                locals_kept[row] = u
            row += 1

    denom = max(nprop, 1)
    rates = acc / denom
    warnings = []
    names = tuple(coord_names(model))
    for j, r in enumerate(rates):
        if not ACCEPT_BAND[0] <= r <= ACCEPT_BAND[1]:
            warnings.append(f"{names[j]} acceptance {r:.3f} outside "
                            f"[{ACCEPT_BAND[0]}, {ACCEPT_BAND[1]}]")
    if nprop_u:
        r = acc_u / nprop_u
        if not ACCEPT_BAND[0] <= r <= ACCEPT_BAND[1]:
            warnings.append(f"random-effect acceptance {r:.3f} outside "
                            f"[{ACCEPT_BAND[0]}, {ACCEPT_BAND[1]}]")
    return ChainOutput(kept, rates, ess(kept).reshape(-1), names=names,
                       model=model, local_draws=locals_kept,
                       warnings=tuple(warnings))


def _sbm_pair_counts(z, a, k):
    onehot = np.eye(k)[z]
    edges = onehot.T @ a @ onehot
    counts = onehot.sum(axis=0)
    pairs = np.outer(counts, counts) - np.diag(counts)
    return counts, 0.5 * edges, 0.5 * pairs


def _sbm_chain(model: SbmModel, data: Dataset, config: ChainConfig):
    rng = substream(config.seed, TAG_CHAIN)
    a = np.asarray(data.adjacency, dtype=float)
    n, k = a.shape[0], model.k
    prior_var = model.prior_sd ** 2
    from .meanfield_vb import sbm_initial_globals, sbm_initial_labels

    z = np.asarray(sbm_initial_labels(a, k), dtype=np.int64).copy()
    omega0, nu0 = sbm_initial_globals(a, z, k)
    omega = np.asarray(omega0, dtype=float).copy()
    nu = np.asarray(nu0, dtype=float).copy()
    dim = (k - 1) + k * (k + 1) // 2
    log_scales = np.log(config.scales(dim, default=0.3))

    keep_locals = n <= LOCAL_DRAW_LIMIT
    kept = np.empty((config.kept, dim))
    locals_kept = np.empty((config.kept, n), dtype=np.int64) \
        if keep_locals else None
    accepted = np.zeros(dim)
    proposals = np.zeros(dim)
    upper = list(sbm_math.upper_indices(k))
    row = 0

    for step in range(config.steps):
        adapting = step < config.burn_in
        logpi = sbm_math.log_pi_from_omega(omega)

        # memberships, one node at a time against the current labels
        onehot = np.eye(k)[z]
        counts = onehot.sum(axis=0)
        for i in range(n):
            counts[z[i]] -= 1
            onehot[i] = 0.0
            e = a[i] @ onehot
            score = logpi + nu @ e - sbm_math.softplus(nu) @ counts
            zi = int(_categorical_rows(rng, score[None, :])[0])
            z[i] = zi
            counts[zi] += 1
            onehot[i, zi] = 1.0

        counts, edges, pairs = _sbm_pair_counts(z, a, k)

        # block odds
        for j in range(k - 1):
            prop = omega.copy()
            prop[j] += math.exp(log_scales[j]) * rng.standard_normal()
            lr = (float(counts @ (sbm_math.log_pi_from_omega(prop) - logpi))
                  + (omega[j] ** 2 - prop[j] ** 2) / (2.0 * prior_var))
            ok = metropolis_accept(rng, lr)
            if ok:
                omega = prop
                logpi = sbm_math.log_pi_from_omega(omega)
            if adapting:
                log_scales[j] = _rm_step(log_scales[j], float(ok), step)
            else:
                proposals[j] += 1
                accepted[j] += float(ok)

        # edge logits
        for idx, (p, q) in enumerate(upper):
            j = (k - 1) + idx
            cur = nu[p, q]
            new = cur + math.exp(log_scales[j]) * rng.standard_normal()
            lr = (edges[p, q] * (new - cur)
                  - pairs[p, q] * (sbm_math.softplus(new)
                                   - sbm_math.softplus(cur))
                  + (cur ** 2 - new ** 2) / (2.0 * prior_var))
            if p != q:
                lr += (edges[q, p] * (new - cur)
                       - pairs[q, p] * (sbm_math.softplus(new)
                                        - sbm_math.softplus(cur)))
            ok = metropolis_accept(rng, lr)
            if ok:
                nu[p, q] = nu[q, p] = new
            if adapting:
                log_scales[j] = _rm_step(log_scales[j], float(ok), step)
            else:
                proposals[j] += 1
                accepted[j] += float(ok)

        if step >= config.burn_in and (step - config.burn_in) % config.thin == 0:
            kept[row] = np.concatenate([omega, sbm_math.pack_nu(nu)])
            if keep_locals:
                locals_kept[row] = z
            row += 1

    rates = np.divide(accepted, proposals, out=np.ones(dim),
                      where=proposals > 0)
    names = tuple(coord_names(model))
    warnings = tuple(
        f"{names[j]} acceptance {rates[j]:.3f} outside "
        f"[{ACCEPT_BAND[0]}, {ACCEPT_BAND[1]}]"
        for j in range(dim)
        if not ACCEPT_BAND[0] <= rates[j] <= ACCEPT_BAND[1])
    return ChainOutput(kept, rates, ess(kept).reshape(-1), names=names,
                       model=model, local_draws=locals_kept,
                       warnings=warnings)


def sample_posterior(model: Model, data: Dataset,
                     config: ChainConfig) -> ChainOutput:
    """Markov chain with the model's exact posterior as invariant law."""
    if isinstance(model, GmmModel):
        return _gmm_chain(model, data, config)
    if isinstance(model, GlmmModel):
        return _glmm_chain(model, data, config)
    if isinstance(model, SbmModel):
        return _sbm_chain(model, data, config)
    raise TypeError(f"not a model: {model!r}")


# ---------------------------------------------------------------------------
# summaries


@dataclass
class MarginalSummary:
    names: tuple
    means: np.ndarray
    variances: np.ndarray
    quantiles: np.ndarray
    ess: np.ndarray
    levels: tuple = QUANTILE_LEVELS

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["coord", "mean", "variance",
                        *[f"q{lv}" for lv in self.levels]])
            for j, name in enumerate(self.names):
                w.writerow([name, repr(float(self.means[j])),
                            repr(float(self.variances[j])),
                            *[repr(float(v)) for v in self.quantiles[j]]])


def _permutation_matrices(model, d):
    mats = []
    for perm in component_permutations(model):
        cols = [permute_vector(model, e, perm)
                for e in np.eye(d)]
        mats.append(np.stack(cols, axis=1))
    return mats


def relabel_draws(model, draws: np.ndarray) -> np.ndarray:
    """Per-draw min-error relabeling against the chain-mean template.

    The template starts at the first draw (the plain mean is degenerate
    under heavy label switching) and is refined until the per-draw
    permutation choices stop changing.
    """
    draws = np.asarray(draws, dtype=float)
    if model is None:
        return draws
    perms = component_permutations(model)
    if len(perms) == 1:
        return draws
    mats = _permutation_matrices(model, draws.shape[1])
    candidates = np.stack([draws @ mat.T for mat in mats])
    template = draws[0]
    choice = np.zeros(draws.shape[0], dtype=np.int64)
    for _ in range(10):
        err = ((candidates - template[None, None, :]) ** 2).sum(axis=2)
        new_choice = np.argmin(err, axis=0)
        aligned = candidates[new_choice, np.arange(draws.shape[0])]
        if np.array_equal(new_choice, choice):
            break
        choice = new_choice
        template = aligned.mean(axis=0)
    return aligned


def marginal_summary(chain: ChainOutput) -> MarginalSummary:
    """Per-coordinate moments and quantiles of the kept draws.

    Label-switching models are relabeled draw by draw before summarizing.
    Too few kept draws is a usage error; too little effective sample is a
    refusal.
    """
    draws = chain.draws
    if draws.shape[0] < MIN_SUMMARY_KEPT:
        raise ValueError(
            f"need at least {MIN_SUMMARY_KEPT} kept draws, got {draws.shape[0]}")
    aligned = relabel_draws(chain.model, draws)
    effective = np.asarray(ess(aligned)).reshape(-1)
    if float(effective.min()) < MIN_SUMMARY_ESS:
        raise EssTooLowError(
            f"minimum effective sample size {effective.min():.1f} is below "
            f"{MIN_SUMMARY_ESS:g}")
    names = chain.names if chain.names else \
        tuple(f"coord{j + 1}" for j in range(draws.shape[1]))
    means = aligned.mean(axis=0)
    variances = aligned.var(axis=0, ddof=1)
    quantiles = np.percentile(aligned, QUANTILE_LEVELS, axis=0).T
    return MarginalSummary(tuple(names), means, variances, quantiles,
                           effective)
