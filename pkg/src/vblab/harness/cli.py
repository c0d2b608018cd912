"""Command line front end.

Subcommands mirror the library surface: simulate data, fit the
variational posterior or the point estimate, evaluate the idealized
posterior on a grid, draw reference samples, probe the local quadratic
expansion, run replication experiments from a config file, and render
report tables and figures from recorded results.
"""

from __future__ import annotations

import dataclasses
import json
import sys

import click
import numpy as np

from .. import __version__
from ..errors import EssTooLowError
from ..meanfield_vb import fit_vb
from ..models import (
    GmmModel,
    coord_names,
    load_dataset,
    model_kind,
    save_dataset,
    simulate,
    theta_vector,
)
from ..rng import RNG_ID
from ..sampler import ChainConfig, marginal_summary, sample_posterior
from ..vb_ideal import GridSpec, ideal_posterior, kl_project_to_meanfield
from ..vfe_em import (
    default_h_grid,
    delta_n_vector,
    fit_vfe,
    quadratic_lan_fit,
    theta_from_vector,
    variational_loglik,
)
from .config import ConfigError, load_config
from .figures import render_report
from .run import ExperimentError, run_experiment

VERSION_MESSAGE = f"%(prog)s %(version)s rng={RNG_ID}"


def _echo_json(payload) -> None:
    click.echo(json.dumps(payload, indent=2, sort_keys=True))


def _load_data(path, model=None, k=None):
    try:
        data = load_dataset(path)
    except FileNotFoundError:
        raise click.FileError(str(path), hint="no such file")
    except (ValueError, KeyError) as exc:
        raise click.ClickException(f"{path}: {exc}")
    if model is not None and model_kind(data.model) != model:
        raise click.ClickException(
            f"dataset holds a {model_kind(data.model)} model, not {model}")
    if k is not None and getattr(data.model, "k", None) != k:
        raise click.ClickException(
            f"dataset model has k={getattr(data.model, 'k', None)}, not {k}")
    return data


def _read_config(path):
    try:
        return load_config(path)
    except FileNotFoundError as exc:
        click.echo(f"Error: {exc}", err=True)
        sys.exit(2)
    except ConfigError as exc:
        raise click.ClickException(str(exc))


model_option = click.option("--model", type=click.Choice(["gmm", "glmm",
                                                          "sbm"]),
                            default=None, help="Assert the dataset's model "
                            "kind.")
k_option = click.option("--k", type=int, default=None,
                        help="Assert the number of components.")


@click.group()
@click.version_option(__version__, message=VERSION_MESSAGE)
def main() -> None:
    """Variational inference laboratory."""


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="Take the model and truth from an experiment config.")
@click.option("--model", type=click.Choice(["gmm"]), default=None,
              help="Mixture shortcut without a config file.")
@click.option("--k", type=int, default=None)
@click.option("--means", type=str, default=None,
              help="Comma separated component means, e.g. --means=-2,2.")
@click.option("--n", "size", type=int, required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def simulate_cmd(config_path, model, k, means, size, seed, out) -> None:
    """Draw one dataset from the model truth and write it as JSON."""
    if config_path is not None:
        config = _read_config(config_path)
        mdl = config.build_model()
        theta0 = config.build_theta0()
    elif model == "gmm":
        if means is None:
            raise click.UsageError("--means is required without --config")
        theta0 = np.array([float(v) for v in means.split(",")])
        mdl = GmmModel(k if k is not None else theta0.size)
        if mdl.k != theta0.size:
            raise click.UsageError("--k disagrees with the number of means")
    else:
        raise click.UsageError("provide --config, or --model gmm with "
                               "--means")
    data = simulate(mdl, theta0, size, seed)
    save_dataset(data, out)
    click.echo(f"wrote {out}")


main.add_command(simulate_cmd, name="simulate")


@main.command("fit-vb")
@model_option
@k_option
@click.option("--data", "data_path", type=click.Path(), required=True)
@click.option("--out", type=click.Path(), default=None)
def fit_vb_cmd(model, k, data_path, out) -> None:
    """Fit the mean-field variational posterior and print it as JSON."""
    data = _load_data(data_path, model, k)
    result = fit_vb(data.model, data)
    payload = result.to_dict()
    if out:
        with open(out, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    _echo_json(payload)


@main.command("fit-vfe")
@model_option
@k_option
@click.option("--data", "data_path", type=click.Path(), required=True)
@click.option("--out", type=click.Path(), default=None)
def fit_vfe_cmd(model, k, data_path, out) -> None:
    """Compute the variational point estimate and print it as JSON."""
    data = _load_data(data_path, model, k)
    result = fit_vfe(data.model, data)
    names = coord_names(data.model, natural=True)
    payload = {
        "estimate": {name: float(v) for name, v in
                     zip(names, result.vector(data.model, natural=True))},
        "objective": result.m_n_value,
        "em_iterations": result.em_iterations,
        "converged": result.converged,
    }
    if out:
        with open(out, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    _echo_json(payload)


@main.command("ideal")
@model_option
@k_option
@click.option("--data", "data_path", type=click.Path(), required=True)
@click.option("--points", type=int, default=401, show_default=True)
@click.option("--halfwidth", type=float, default=10.0, show_default=True,
              help="Grid halfwidth in curvature standard deviations.")
@click.option("--axes", type=str, default=None,
              help="Comma separated coordinate indices to keep free.")
@click.option("--project/--no-project", default=True, show_default=True,
              help="Also fit the closest independent-Gaussian density.")
@click.option("--out", type=click.Path(), default=None,
              help="Write the grid density as CSV.")
def ideal_cmd(model, k, data_path, points, halfwidth, axes, project,
              out) -> None:
    """Evaluate the prior-weighted profile posterior on a grid."""
    data = _load_data(data_path, model, k)
    spec = GridSpec(points=points, halfwidth_sds=halfwidth,
                    axes=None if axes is None else
                    tuple(int(a) for a in axes.split(",")))
    try:
        grid = ideal_posterior(data.model, data, spec)
    except ValueError as exc:
        raise click.ClickException(str(exc))
    if out:
        grid.save_csv(out)
    payload = {
        "dimensions": grid.ndim,
        "points_per_axis": points,
        "log_normalizer": grid.normalizer,
        "mode": [float(v) for v in grid.mode()],
    }
    if project:
        projection = kl_project_to_meanfield(grid)
        payload["projection"] = {
            "mean": [float(v) for v in projection.mean],
            "sd": [float(v) for v in projection.sds],
            "kl": projection.kl_value,
            "multimodal_fit": projection.multimodal_fit,
        }
    _echo_json(payload)


@main.command("sample")
@model_option
@k_option
@click.option("--data", "data_path", type=click.Path(), required=True)
@click.option("--steps", type=int, default=100000, show_default=True)
@click.option("--burn-in", type=int, default=20000, show_default=True)
@click.option("--thin", type=int, default=1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), default=None,
              help="Write the kept draws as CSV.")
def sample_cmd(model, k, data_path, steps, burn_in, thin, seed, out) -> None:
    """Run the reference posterior sampler and print marginal summaries."""
    data = _load_data(data_path, model, k)
    chain = sample_posterior(data.model, data, ChainConfig(
        steps=steps, burn_in=burn_in, thin=thin, seed=seed))
    if out:
        chain.save_csv(out)
    payload = {
        "kept": int(chain.draws.shape[0]),
        "acceptance": [float(r) for r in chain.acceptance_rates],
        "ess": [float(e) for e in chain.ess],
        "warnings": list(chain.warnings),
    }
    try:
        summary = marginal_summary(chain)
        payload["marginals"] = {
            name: {"mean": float(summary.means[j]),
                   "variance": float(summary.variances[j]),
                   "ess": float(summary.ess[j])}
            for j, name in enumerate(summary.names)}
    except (ValueError, EssTooLowError) as exc:
        payload["summary_skipped"] = str(exc)
    _echo_json(payload)


@main.command("check-lan")
@model_option
@k_option
@click.option("--data", "data_path", type=click.Path(), required=True)
@click.option("--radius", type=int, default=2, show_default=True,
              help="Lattice radius in rate-scaled units.")
def check_lan_cmd(model, k, data_path, radius) -> None:
    """Fit the local quadratic expansion of the profile objective."""
    data = _load_data(data_path, model, k)
    mdl = data.model
    vfe = fit_vfe(mdl, data)
    center = theta_vector(mdl, vfe.theta_hat, natural=True)
    dn = delta_n_vector(mdl, data)
    h = default_h_grid(center.size, radius=radius)
    locs = None

    def m_n(vec):
        nonlocal locs
        val, locs = variational_loglik(
            mdl, theta_from_vector(mdl, vec, natural=True), data, init=locs)
        return val

    base = m_n(center)
    values = np.array([m_n(center + dn * hh) - base for hh in h])
    fit = quadratic_lan_fit(h, values)
    payload = {
        "center": [float(v) for v in center],
        "sup_residual": fit.sup_residual,
        "min_eigenvalue": fit.min_eigenvalue,
        "curvature": [[float(v) for v in row] for row in fit.v],
        "lattice_points": int(len(h)),
    }
    if fit.delta is not None:
        payload["offset"] = [float(v) for v in fit.delta]
    _echo_json(payload)


@main.command("experiment")
@click.option("--config", "config_path", type=click.Path(), required=True)
@click.option("--seed", type=int, default=None,
              help="Override the config seed.")
@click.option("--out", type=click.Path(), default=None,
              help="Override the config output directory.")
@click.option("--jobs", type=int, default=None,
              help="Worker processes; VBLAB_JOBS is the fallback.")
def experiment_cmd(config_path, seed, out, jobs) -> None:
    """Run a replication sweep from a config file."""
    config = _read_config(config_path)
    if seed is not None:
        config = dataclasses.replace(config, seed=seed)
    try:
        report = run_experiment(config, output=out, jobs=jobs)
    except ExperimentError as exc:
        raise click.ClickException(str(exc))
    click.echo(f"records: {len(report.records)}  "
               f"failures: {len(report.failures)}  "
               f"wall: {report.wall_seconds:.1f}s")
    for name, check in report.checks.items():
        click.echo(f"check {name}: {'PASS' if check.passed else 'FAIL'}")
    if not report.passed:
        sys.exit(1)


@main.command("report")
@click.option("--records", "records_path", type=click.Path(), required=True,
              help="records.csv from an experiment run.")
@click.option("--out", type=click.Path(), default=None,
              help="Directory for the summary and figures.")
@click.option("--format", "fmt", type=click.Choice(["csv", "json"]),
              default="csv", show_default=True)
def report_cmd(records_path, out, fmt) -> None:
    """Summarize recorded results and render figures next to them."""
    try:
        paths = render_report(records_path, out_dir=out, fmt=fmt)
    except FileNotFoundError:
        raise click.FileError(str(records_path), hint="no such file")
    except ValueError as exc:
        raise click.ClickException(str(exc))
    for path in paths:
        click.echo(f"wrote {path}")


if __name__ == "__main__":
    main()
