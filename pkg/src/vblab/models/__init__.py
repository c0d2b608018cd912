"""Generative models, priors, simulators, and exact likelihood evaluators.

Three model classes share one operation surface:

* ``GmmModel``: univariate K-component Gaussian mixture, unit variances,
  uniform weights; unknowns are the component means, locals are assignments.
* ``GlmmModel``: Poisson mixed model with fixed effects (beta0, beta1) and a
  per-group Gaussian random effect with variance sigma2 (carried internally
  on the log scale); locals are the group effects.
* ``SbmModel``: K-block stochastic block model in log-odds coordinates
  (omega, nu); locals are node memberships.

``simulate`` draws datasets from counter-based substreams, ``log_joint`` and
``log_prior`` evaluate exact densities, ``log_marginal_brute`` enumerates the
local sum where that is finite and affordable, ``profile_locals`` maximizes
over the locals. Datasets serialize to JSON (and a flat CSV table for the
mixed model).
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, replace

import numpy as np

from ..errors import EnumerationBudgetError
from ..rng import TAG_SIMULATE, substream
from . import glmm as glmm_math
from . import gmm as gmm_math
from . import sbm as sbm_math
from .glmm import MAX_RATE, CovariateLaw

SCHEMA_VERSION = 1
_LOG_2PI = math.log(2.0 * math.pi)
MAX_PERMUTATION_COMPONENTS = 5


# ---------------------------------------------------------------------------
# model configurations


@dataclass(frozen=True)
class GmmModel:
    k: int
    prior_mean_sd: float = 10.0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if not self.prior_mean_sd > 0:
            raise ValueError("prior_mean_sd must be positive")


@dataclass(frozen=True)
class GlmmModel:
    group_size: int
    covariates: tuple
    prior_loc_sd: float = 10.0
    prior_log_sigma2_sd: float = 2.0

    def __post_init__(self):
        if self.group_size < 1:
            raise ValueError("group_size must be at least 1")
        laws = tuple(c if isinstance(c, CovariateLaw) else CovariateLaw(*c)
                     for c in self.covariates)
        if not laws:
            raise ValueError("at least one covariate is required")
        object.__setattr__(self, "covariates", laws)
        if not (self.prior_loc_sd > 0 and self.prior_log_sigma2_sd > 0):
            raise ValueError("prior scales must be positive")

    @property
    def n_covariates(self) -> int:
        return len(self.covariates)


@dataclass(frozen=True)
class SbmModel:
    k: int
    prior_sd: float = 10.0

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be at least 2")
        if not self.prior_sd > 0:
            raise ValueError("prior_sd must be positive")


Model = GmmModel | GlmmModel | SbmModel


# ---------------------------------------------------------------------------
# parameters


def as_gmm_means(theta) -> np.ndarray:
    means = np.atleast_1d(np.asarray(theta, dtype=float))
    if means.ndim != 1:
        raise ValueError("mixture means must be a vector")
    if not np.all(np.isfinite(means)):
        raise ValueError("non-finite mixture means")
    return means


@dataclass(frozen=True)
class GlmmParams:
    beta0: float
    beta1: np.ndarray
    sigma2: float

    def __post_init__(self):
        beta1 = np.atleast_1d(np.asarray(self.beta1, dtype=float))
        object.__setattr__(self, "beta1", beta1)
        vals = [self.beta0, *beta1, self.sigma2]
        if not np.all(np.isfinite(vals)):
            raise ValueError("non-finite mixed-model parameters")
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")

    def vector(self, log_scale: bool = True) -> np.ndarray:
        last = math.log(self.sigma2) if log_scale else self.sigma2
        return np.array([self.beta0, *self.beta1, last])

    @classmethod
    def from_vector(cls, v, log_scale: bool = True) -> "GlmmParams":
        v = np.asarray(v, dtype=float)
        sigma2 = math.exp(v[-1]) if log_scale else float(v[-1])
        return cls(float(v[0]), v[1:-1].copy(), sigma2)


@dataclass(frozen=True)
class SbmParams:
    omega: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        omega = np.atleast_1d(np.asarray(self.omega, dtype=float))
        nu = np.asarray(self.nu, dtype=float)
        if nu.ndim != 2 or nu.shape[0] != nu.shape[1]:
            raise ValueError("nu must be square")
        if omega.size != nu.shape[0] - 1:
            raise ValueError("omega must have one entry per non-reference block")
        if not (np.all(np.isfinite(omega)) and np.all(np.isfinite(nu))):
            raise ValueError("non-finite block-model parameters")
        if not np.allclose(nu, nu.T, rtol=0.0, atol=1e-12):
            raise ValueError("nu must be symmetric")
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "nu", 0.5 * (nu + nu.T))

    @property
    def k(self) -> int:
        return self.nu.shape[0]

    def pi(self) -> np.ndarray:
        return np.exp(sbm_math.log_pi_from_omega(self.omega))

    def edge_probs(self) -> np.ndarray:
        return sbm_math.edge_probabilities(self.nu)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.omega, sbm_math.pack_nu(self.nu)])

    @classmethod
    def from_vector(cls, v, k: int) -> "SbmParams":
        v = np.asarray(v, dtype=float)
        return cls(v[: k - 1].copy(), sbm_math.unpack_nu(v[k - 1:], k))


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    """Observed data plus provenance (true parameters, latents, seed)."""

    model: Model
    theta0: object | None = None
    seed: int | None = None
    x: np.ndarray | None = None
    y: np.ndarray | None = None
    adjacency: np.ndarray | None = None
    latents: np.ndarray | None = None

    @property
    def kind(self) -> str:
        return model_kind(self.model)

    @property
    def size(self) -> int:
        """Observations (mixture), groups (mixed model), or nodes (block model)."""
        if isinstance(self.model, GmmModel):
            return len(self.x)
        if isinstance(self.model, GlmmModel):
            return self.y.shape[0]
        return self.adjacency.shape[0]


def model_kind(model: Model) -> str:
    if isinstance(model, GmmModel):
        return "gmm"
    if isinstance(model, GlmmModel):
        return "glmm"
    if isinstance(model, SbmModel):
        return "sbm"
    raise TypeError(f"not a model: {model!r}")


def simulate(model: Model, theta0, n: int, seed: int) -> Dataset:
    """Draw a dataset of size n from the model at theta0.

    The stream is the (seed, simulate-tag, n) substream, so datasets at
    different sizes under one seed are independent and stable under
    extensions of the size list.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = substream(seed, TAG_SIMULATE, n)
    if isinstance(model, GmmModel):
        means = as_gmm_means(theta0)
        if means.size != model.k:
            raise ValueError(f"expected {model.k} means, got {means.size}")
        c = rng.integers(0, model.k, size=n)
        x = means[c] + rng.standard_normal(n)
        return Dataset(model, means, seed, x=x, latents=c)
    if isinstance(model, GlmmModel):
        p: GlmmParams = theta0
        if p.beta1.size != model.n_covariates:
            raise ValueError("beta1 length must match the covariate laws")
        x = glmm_math.draw_covariates(model.covariates, n, model.group_size, rng)
        u = math.sqrt(p.sigma2) * rng.standard_normal(n)
        rate = np.exp(glmm_math.cell_eta(x, p.beta0, p.beta1) + u[:, None])
        if rate.size and rate.max() > MAX_RATE:
            raise ValueError(f"Poisson rate overflow (max rate {rate.max():.3e})")
        y = rng.poisson(rate).astype(float)
        return Dataset(model, p, seed, x=x, y=y, latents=u)
    if isinstance(model, SbmModel):
        p = theta0 if isinstance(theta0, SbmParams) else SbmParams(*theta0)
        if p.k != model.k:
            raise ValueError("parameter block count must match the model")
        z = rng.choice(model.k, size=n, p=p.pi())
        a = np.zeros((n, n))
        iu, ju = np.triu_indices(n, k=1)
        h = p.edge_probs()
        bits = (rng.random(iu.size) < h[z[iu], z[ju]]).astype(float)
        a[iu, ju] = bits
        a[ju, iu] = bits
        return Dataset(model, p, seed, adjacency=a, latents=z)
    raise TypeError(f"not a model: {model!r}")


# ---------------------------------------------------------------------------
# densities


def _log_normal(v, sd) -> float:
    v = np.asarray(v, dtype=float)
    return float(np.sum(-0.5 * _LOG_2PI - math.log(sd) - 0.5 * (v / sd) ** 2))


def log_prior(model: Model, theta) -> float:
    """Log prior density of the global parameters.

    Location-type coordinates carry independent N(0, sd^2) priors; the
    mixed-model variance is N(0, sd^2) on log sigma2.
    """
    if isinstance(model, GmmModel):
        return _log_normal(as_gmm_means(theta), model.prior_mean_sd)
    if isinstance(model, GlmmModel):
        p: GlmmParams = theta
        return (_log_normal([p.beta0, *p.beta1], model.prior_loc_sd)
                + _log_normal(math.log(p.sigma2), model.prior_log_sigma2_sd))
    if isinstance(model, SbmModel):
        p = theta
        return (_log_normal(p.omega, model.prior_sd)
                + _log_normal(sbm_math.pack_nu(p.nu), model.prior_sd))
    raise TypeError(f"not a model: {model!r}")


def log_joint(model: Model, theta, latents, data: Dataset) -> float:
    """log p(theta) + log p(z | theta) + log p(x | z, theta)."""
    if isinstance(model, GmmModel):
        means = as_gmm_means(theta)
        c = np.asarray(latents)
        if c.shape != data.x.shape or (c.size and (c.min() < 0 or c.max() >= model.k)):
            raise ValueError("assignment vector does not match the data")
        dev = data.x - means[c]
        return (log_prior(model, means) - data.x.size * math.log(model.k)
                + float(np.sum(-0.5 * _LOG_2PI - 0.5 * dev * dev)))
    if isinstance(model, GlmmModel):
        p: GlmmParams = theta
        u = np.asarray(latents, dtype=float)
        if u.shape != (data.y.shape[0],):
            raise ValueError("need one random effect per group")
        if not np.all(np.isfinite(u)):
            raise ValueError("non-finite random effects")
        eta = glmm_math.cell_eta(data.x, p.beta0, p.beta1) + u[:, None]
        return (log_prior(model, p) + _log_normal(u, math.sqrt(p.sigma2))
                + glmm_math.poisson_complete_term(data.y, eta))
    if isinstance(model, SbmModel):
        p = theta
        z = np.asarray(latents)
        n = data.adjacency.shape[0]
        if z.shape != (n,) or (z.size and (z.min() < 0 or z.max() >= model.k)):
            raise ValueError("membership vector does not match the data")
        return log_prior(model, p) + sbm_math.complete_loglik(data.adjacency, z, p.omega, p.nu)
    raise TypeError(f"not a model: {model!r}")


def log_marginal_brute(model: Model, theta, data: Dataset) -> float:
    """log p(theta) + log sum_z p(x, z | theta), by exhaustive enumeration.

    Only models with finitely many local configurations qualify, and the
    enumeration budget caps k**n.
    """
    if isinstance(model, GmmModel):
        n = data.x.size
        if model.k**n > sbm_math.ENUMERATION_BUDGET:
            raise EnumerationBudgetError(
                f"enumeration over {model.k}^{n} assignments exceeds the budget")
        return log_prior(model, theta) + gmm_math.enumerate_log_marginal(data.x, as_gmm_means(theta))
    if isinstance(model, GlmmModel):
        raise EnumerationBudgetError(
            "the mixed model has continuous local variables; nothing to enumerate")
    if isinstance(model, SbmModel):
        p = theta
        return log_prior(model, p) + sbm_math.enumerate_log_marginal(data.adjacency, p.omega, p.nu)
    raise TypeError(f"not a model: {model!r}")


def profile_locals(model: Model, theta, data: Dataset):
    """argmax over the local variables of p(x, z | theta).

    Mixture assignments decouple per datum (exact ties take the smallest
    component index); block memberships are found by exhaustive enumeration
    (ties take the lowest enumeration index); mixed-model effects solve one
    concave scalar problem per group.
    """
    if isinstance(model, GmmModel):
        return gmm_math.profile_assignments(data.x, as_gmm_means(theta))
    if isinstance(model, GlmmModel):
        p: GlmmParams = theta
        eta = glmm_math.cell_eta(data.x, p.beta0, p.beta1)
        return glmm_math.profile_random_effects(
            data.y.sum(axis=1), np.exp(eta).sum(axis=1), p.sigma2)
    if isinstance(model, SbmModel):
        p = theta
        return sbm_math.enumerate_profile(data.adjacency, p.omega, p.nu)
    raise TypeError(f"not a model: {model!r}")


# ---------------------------------------------------------------------------
# coordinate conventions


def coord_names(model: Model, natural: bool = False) -> list[str]:
    """Flat coordinate names; the mixed-model variance is log_sigma2 unless natural."""
    if isinstance(model, GmmModel):
        return [f"mu{j + 1}" for j in range(model.k)]
    if isinstance(model, GlmmModel):
        last = "sigma2" if natural else "log_sigma2"
        return ["beta0", *[f"beta1_{j + 1}" for j in range(model.n_covariates)], last]
    if isinstance(model, SbmModel):
        names = [f"omega_{a + 1}" for a in range(model.k - 1)]
        names += [f"nu_{a + 1}{b + 1}" for a, b in sbm_math.upper_indices(model.k)]
        return names
    raise TypeError(f"not a model: {model!r}")


def theta_vector(model: Model, theta, natural: bool = False) -> np.ndarray:
    if isinstance(model, GmmModel):
        return as_gmm_means(theta)
    if isinstance(model, GlmmModel):
        return theta.vector(log_scale=not natural)
    return theta.vector()


# ---------------------------------------------------------------------------
# label permutations


def component_permutations(model: Model):
    """All label permutations acting on the parameter vector."""
    if isinstance(model, GlmmModel):
        return [(0,)]
    k = model.k
    if k > MAX_PERMUTATION_COMPONENTS:
        raise ValueError(f"permutation search supports at most "
                         f"{MAX_PERMUTATION_COMPONENTS} components, got {k}")
    return list(itertools.permutations(range(k)))


def permute_vector(model: Model, vector: np.ndarray, perm) -> np.ndarray:
    """Apply a component relabeling to a flat parameter vector."""
    v = np.asarray(vector, dtype=float)
    if isinstance(model, GlmmModel):
        return v.copy()
    if isinstance(model, GmmModel):
        return v[list(perm)]
    k = model.k
    # New log odds are taken against the relabeled reference block, and the
    # edge logits permute by index.
    full = np.concatenate([v[: k - 1], [0.0]])
    new_full = full[list(perm)]
    omega = new_full[: k - 1] - new_full[k - 1]
    nu = sbm_math.unpack_nu(v[k - 1:], k)
    p = list(perm)
    nu_new = nu[np.ix_(p, p)]
    return np.concatenate([omega, sbm_math.pack_nu(nu_new)])


def align_vector(model: Model, vector: np.ndarray, reference: np.ndarray):
    """Relabel `vector` to minimize squared distance to `reference`.

    Returns (aligned, permutation). Identity for models without label symmetry.
    """
    best = None
    best_perm = None
    best_err = math.inf
    for perm in component_permutations(model):
        cand = permute_vector(model, vector, perm)
        err = float(np.sum((cand - np.asarray(reference, dtype=float)) ** 2))
        if err < best_err:
            best, best_perm, best_err = cand, perm, err
    return best, best_perm


# ---------------------------------------------------------------------------
# serialization


def _model_to_dict(model: Model) -> dict:
    if isinstance(model, GmmModel):
        return {"kind": "gmm", "k": model.k, "prior_mean_sd": model.prior_mean_sd}
    if isinstance(model, GlmmModel):
        return {"kind": "glmm", "group_size": model.group_size,
                "covariates": [[c.kind, c.param] for c in model.covariates],
                "prior_loc_sd": model.prior_loc_sd,
                "prior_log_sigma2_sd": model.prior_log_sigma2_sd}
    return {"kind": "sbm", "k": model.k, "prior_sd": model.prior_sd}


def model_from_dict(d: dict) -> Model:
    kind = d["kind"]
    if kind == "gmm":
        return GmmModel(int(d["k"]), float(d.get("prior_mean_sd", 10.0)))
    if kind == "glmm":
        return GlmmModel(int(d["group_size"]),
                         tuple(CovariateLaw(c[0], float(c[1])) for c in d["covariates"]),
                         float(d.get("prior_loc_sd", 10.0)),
                         float(d.get("prior_log_sigma2_sd", 2.0)))
    if kind == "sbm":
        return SbmModel(int(d["k"]), float(d.get("prior_sd", 10.0)))
    raise ValueError(f"unknown model kind {kind!r}")


def _theta_to_dict(model: Model, theta) -> dict | None:
    if theta is None:
        return None
    if isinstance(model, GmmModel):
        return {"means": np.asarray(theta, dtype=float).tolist()}
    if isinstance(model, GlmmModel):
        return {"beta0": theta.beta0, "beta1": theta.beta1.tolist(), "sigma2": theta.sigma2}
    return {"omega": theta.omega.tolist(), "nu_upper": sbm_math.pack_nu(theta.nu).tolist()}


def theta_from_dict(model: Model, d: dict | None):
    if d is None:
        return None
    if isinstance(model, GmmModel):
        return np.asarray(d["means"], dtype=float)
    if isinstance(model, GlmmModel):
        return GlmmParams(float(d["beta0"]), np.asarray(d["beta1"], dtype=float),
                          float(d["sigma2"]))
    return SbmParams(np.asarray(d["omega"], dtype=float),
                     sbm_math.unpack_nu(d["nu_upper"], model.k))


def dataset_to_dict(ds: Dataset) -> dict:
    out = {"schema": SCHEMA_VERSION, "model": _model_to_dict(ds.model),
           "theta0": _theta_to_dict(ds.model, ds.theta0), "seed": ds.seed}
    if isinstance(ds.model, GmmModel):
        out["data"] = {"x": ds.x.tolist()}
    elif isinstance(ds.model, GlmmModel):
        out["data"] = {"x": ds.x.tolist(), "y": ds.y.tolist()}
    else:
        n = ds.adjacency.shape[0]
        iu, ju = np.triu_indices(n, k=1)
        out["data"] = {"n_nodes": n,
                       "adjacency_upper": ds.adjacency[iu, ju].astype(int).tolist()}
    if ds.latents is not None:
        out["latents"] = np.asarray(ds.latents).tolist()
    return out


def dataset_from_dict(d: dict) -> Dataset:
    if d.get("schema") != SCHEMA_VERSION:
        raise ValueError(f"unsupported dataset schema {d.get('schema')!r}")
    model = model_from_dict(d["model"])
    theta0 = theta_from_dict(model, d.get("theta0"))
    payload = d["data"]
    latents = d.get("latents")
    if isinstance(model, GmmModel):
        ds = Dataset(model, theta0, d.get("seed"), x=np.asarray(payload["x"], dtype=float))
        if latents is not None:
            ds.latents = np.asarray(latents, dtype=int)
        return ds
    if isinstance(model, GlmmModel):
        ds = Dataset(model, theta0, d.get("seed"),
                     x=np.asarray(payload["x"], dtype=float),
                     y=np.asarray(payload["y"], dtype=float))
        if latents is not None:
            ds.latents = np.asarray(latents, dtype=float)
        return ds
    n = int(payload["n_nodes"])
    a = np.zeros((n, n))
    iu, ju = np.triu_indices(n, k=1)
    bits = np.asarray(payload["adjacency_upper"], dtype=float)
    if bits.size != iu.size:
        raise ValueError("adjacency payload has the wrong length")
    a[iu, ju] = bits
    a[ju, iu] = bits
    ds = Dataset(model, theta0, d.get("seed"), adjacency=a)
    if latents is not None:
        ds.latents = np.asarray(latents, dtype=int)
    return ds


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "w") as fh:
        json.dump(dataset_to_dict(ds), fh, indent=1)
        fh.write("\n")


def load_dataset(path) -> Dataset:
    with open(path) as fh:
        return dataset_from_dict(json.load(fh))


def save_glmm_csv(ds: Dataset, path) -> None:
    """Flat table form of a mixed-model dataset: group, obs, x*, y."""
    if not isinstance(ds.model, GlmmModel):
        raise TypeError("CSV table form only applies to the mixed model")
    d = ds.model.n_covariates
    header = ["group", "idx", *[f"x{j + 1}" for j in range(d)], "y"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        m, n = ds.y.shape
        for i in range(m):
            for j in range(n):
                w.writerow([i, j, *(repr(float(v)) for v in ds.x[i, j]), repr(float(ds.y[i, j]))])


def load_glmm_csv(path, model: GlmmModel) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return Dataset(model, None, None,
                       x=np.zeros((0, model.group_size, model.n_covariates)),
                       y=np.zeros((0, model.group_size)))
    m = max(int(r["group"]) for r in rows) + 1
    n = max(int(r["idx"]) for r in rows) + 1
    if n != model.group_size:
        raise ValueError(f"table has groups of size {n}, model says {model.group_size}")
    d = model.n_covariates
    x = np.zeros((m, n, d))
    y = np.zeros((m, n))
    for r in rows:
        i, j = int(r["group"]), int(r["idx"])
        x[i, j] = [float(r[f"x{c + 1}"]) for c in range(d)]
        y[i, j] = float(r["y"])
    return Dataset(model, None, None, x=x, y=y)
