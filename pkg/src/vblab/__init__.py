"""Desk-scale laboratory for variational Bayes asymptotics.

Mean-field variational fits, variational-EM point estimation, the ideal
variational posterior on dense grids, MCMC reference samplers, and a
replication harness, over three model classes: a Gaussian mixture with known
variances, a Poisson mixed model, and a stochastic block model.
"""

__version__ = "0.1.0"

from .rng import RNG_ID, child_seed, substream
from .gaussian_kl import Gaussian, diag_kl_projection, kl_normal, tv_normal_1d
from .models import (
    Dataset,
    GlmmModel,
    GlmmParams,
    GmmModel,
    SbmModel,
    SbmParams,
    align_vector,
    coord_names,
    load_dataset,
    log_joint,
    log_marginal_brute,
    model_from_dict,
    save_dataset,
    simulate,
    theta_from_dict,
    theta_vector,
)
from .meanfield_vb import VBResult, fit_vb, vbe
from .vfe_em import (
    VfeResult,
    fit_vfe,
    lan_expansion_probe,
    quadratic_lan_fit,
    variational_loglik,
)
from .vb_ideal import (
    GridDensity,
    GridSpec,
    ideal_posterior,
    ideal_vs_vb_gap,
    kl_project_to_meanfield,
)
from .sampler import (
    ChainConfig,
    ChainOutput,
    marginal_summary,
    relabel_draws,
    sample_posterior,
)
from .asymptotics import (
    AsymptoticPrediction,
    consistency_check,
    glmm_asymptotic_prediction,
    glmm_predicted_vars,
    gmm_sandwich,
    normality_check,
    rate_separation_glmm,
    underdispersion_check,
)
from .harness import (
    ExperimentConfig,
    ExperimentReport,
    load_config,
    run_experiment,
)

__all__ = [
    "AsymptoticPrediction",
    "ChainConfig",
    "ChainOutput",
    "Dataset",
    "ExperimentConfig",
    "ExperimentReport",
    "Gaussian",
    "GlmmModel",
    "GlmmParams",
    "GmmModel",
    "GridDensity",
    "GridSpec",
    "RNG_ID",
    "SbmModel",
    "SbmParams",
    "VBResult",
    "VfeResult",
    "__version__",
    "align_vector",
    "child_seed",
    "consistency_check",
    "coord_names",
    "diag_kl_projection",
    "fit_vb",
    "fit_vfe",
    "glmm_asymptotic_prediction",
    "glmm_predicted_vars",
    "gmm_sandwich",
    "ideal_posterior",
    "ideal_vs_vb_gap",
    "kl_normal",
    "kl_project_to_meanfield",
    "lan_expansion_probe",
    "load_config",
    "load_dataset",
    "log_joint",
    "log_marginal_brute",
    "marginal_summary",
    "model_from_dict",
    "normality_check",
    "quadratic_lan_fit",
    "rate_separation_glmm",
    "relabel_draws",
    "run_experiment",
    "sample_posterior",
    "save_dataset",
    "simulate",
    "substream",
    "theta_from_dict",
    "theta_vector",
    "tv_normal_1d",
    "underdispersion_check",
    "variational_loglik",
    "vbe",
]
