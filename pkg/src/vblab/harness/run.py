"""Seeded replication sweeps: simulate, fit, record, check, report.

Every replication runs in its own substream keyed by (seed, n, rep), so
extending the size list or adding replications never perturbs existing
ones, and results are identical whether replications run serially or in a
worker pool. Records and reports are written atomically.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .. import __version__
from ..asymptotics import (
    CheckReport,
    consistency_check,
    FittedPair,
    glmm_asymptotic_prediction,
    gmm_sandwich,
    normality_check,
    rate_separation_glmm,
)
from ..errors import DegenerateDataError, EssTooLowError, NewtonError
from ..meanfield_vb import fit_vb, vbe
from ..models import (
    GlmmModel,
    GmmModel,
    align_vector,
    coord_names,
    simulate,
    theta_vector,
)
from ..rng import RNG_ID, child_seed
from ..sampler import ChainConfig, relabel_draws, sample_posterior
from ..vfe_em import fit_vfe
from .config import ExperimentConfig

FAILURE_LIMIT = 0.1
RECORD_HEADER = ("n", "rep", "estimator", "coord", "value", "error",
                 "seconds")


class ExperimentError(RuntimeError):
    """The run as a whole failed (too many replication failures)."""


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    records: list
    checks: dict
    failures: list
    wall_seconds: float
    version: str = __version__
    rng_id: str = RNG_ID

    @property
    def passed(self) -> bool:
        return all(rep.passed for rep in self.checks.values())

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "version": self.version,
            "rng_id": self.rng_id,
            "records": len(self.records),
            "failures": list(self.failures),
            "checks": {name: rep.to_json_dict()
                       for name, rep in self.checks.items()},
            "passed": self.passed,
            "wall_seconds": self.wall_seconds,
        }


def _atomic_write(path, writer) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            writer(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_records_csv(records, path) -> None:
    def writer(fh):
        w = csv.writer(fh)
        w.writerow(RECORD_HEADER)
        for row in records:
            n, rep, est, coord, value, error, seconds = row
            w.writerow([n, rep, est, coord, repr(float(value)),
                        repr(float(error)), f"{seconds:.3f}"])

    _atomic_write(path, writer)


def records_equal_ignoring_time(path_a, path_b) -> bool:
    """Byte-level equality of two record files, timing column excluded."""

    def stripped(path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            return rows
        try:
            drop = rows[0].index("seconds")
        except ValueError:
            return rows
        return [row[:drop] + row[drop + 1:] for row in rows]

    return stripped(path_a) == stripped(path_b)


# ---------------------------------------------------------------------------
# one replication


def _align_to_truth(model, vector, truth, sds=None):
    aligned, perm = align_vector(model, vector, truth)
    if sds is None:
        return aligned, None
    if isinstance(model, GlmmModel):
        return aligned, np.asarray(sds, dtype=float)
    if isinstance(model, GmmModel):
        return aligned, np.asarray(sds, dtype=float)[list(perm)]
    # block-model odds mix coordinates under relabeling; per-coordinate
    # sds do not transform, so they are only returned for the identity
    if tuple(perm) == tuple(range(len(perm))):
        return aligned, np.asarray(sds, dtype=float)
    return aligned, None


def run_replication(config: ExperimentConfig, n: int, rep: int) -> dict:
    """Simulate and fit one replication; returns plain serializable data."""
    model = config.build_model()
    theta0 = config.build_theta0()
    truth_natural = theta_vector(model, theta0, natural=True)
    seed = child_seed(config.seed, n, rep)
    data = simulate(model, theta0, n, seed)
    out = {"n": n, "rep": rep}

    for estimator in config.estimators:
        start = time.perf_counter()
        if estimator == "vb":
            fit = fit_vb(model, data)
            raw_natural = vbe(fit, natural=True)
            aligned, sds = _align_to_truth(
                model, raw_natural, truth_natural, fit.global_factors.sds)
            means_aligned, _ = _align_to_truth(
                model, fit.global_factors.means, theta_vector(model, theta0))
            out["vb"] = aligned.tolist()
            out["vb_factor_means"] = means_aligned.tolist()
            out["vb_factor_sds"] = None if sds is None else sds.tolist()
        elif estimator == "vfe":
            fit = fit_vfe(model, data)
            aligned, _ = _align_to_truth(
                model, fit.vector(model, natural=True), truth_natural)
            factor_aligned, _ = _align_to_truth(
                model, fit.vector(model, natural=False),
                theta_vector(model, theta0))
            out["vfe"] = aligned.tolist()
            out["vfe_factor"] = factor_aligned.tolist()
        elif estimator == "sampler":
            spec = config.sampler
            chain = sample_posterior(model, data, ChainConfig(
                steps=spec.steps, burn_in=spec.burn_in, thin=spec.thin,
                seed=seed))
            draws = relabel_draws(model, chain.draws)
            mean_factor = draws.mean(axis=0)
            aligned_factor, var = _align_to_truth(
                model, mean_factor, theta_vector(model, theta0),
                np.sqrt(draws.var(axis=0, ddof=1)))
            natural = aligned_factor.copy()
            if isinstance(model, GlmmModel):
                # report the variance coordinate as the chain mean of sigma2
                s2_draws = np.exp(draws[:, -1])
                natural[-1] = float(s2_draws.mean())
            out["sampler"] = natural.tolist()
            out["sampler_factor_var"] = None if var is None \
                else (var ** 2).tolist()
            out["sampler_ess"] = chain.ess.tolist()
            out["sampler_warnings"] = list(chain.warnings)
        out[f"{estimator}_seconds"] = time.perf_counter() - start
    return out


def _worker(args):
    config_dict, n, rep = args
    from .config import config_from_dict

    config = config_from_dict(config_dict)
    try:
        return run_replication(config, n, rep)
    except (DegenerateDataError, NewtonError, EssTooLowError,
            FloatingPointError, np.linalg.LinAlgError, RuntimeError,
            ValueError) as exc:
        return {"n": n, "rep": rep,
                "error": f"{type(exc).__name__}: {exc}"}


# ---------------------------------------------------------------------------
# checks over the collected replications


def _stack(results, key, n):
    rows = [r[key] for r in results if r["n"] == n and key in r]
    return np.asarray(rows, dtype=float)


def _run_checks(config: ExperimentConfig, results) -> dict:
    model = config.build_model()
    theta0 = config.build_theta0()
    truth_natural = theta_vector(model, theta0, natural=True)
    names = tuple(coord_names(model, natural=True))
    reports = {}
    for spec in config.checks:
        if spec.kind == "consistency":
            estimator = spec.option("estimator", "vb")
            estimates = {n: _stack(results, estimator, n)
                         for n in config.sizes}
            reports[spec.kind] = consistency_check(
                estimates, truth_natural,
                expected_slope=float(spec.option("expected_slope", -0.5)),
                band=float(spec.option("band", 0.15)),
                min_sizes=int(spec.option("min_sizes", 4)),
                min_reps=int(spec.option("min_reps", 50)),
                names=names)
        elif spec.kind == "normality":
            prediction = gmm_sandwich(
                model, theta0,
                mc_samples=int(spec.option("mc_samples", 20000)),
                seed=int(spec.option("prediction_seed", 0)))
            fitted = [
                FittedPair(r["n"],
                           np.asarray(r["vb_factor_means"], dtype=float),
                           np.asarray(r["vb_factor_sds"], dtype=float),
                           np.asarray(r["vfe_factor"], dtype=float))
                for r in results
                if "vb_factor_means" in r and "vfe_factor" in r]
            reports[spec.kind] = normality_check(
                fitted, prediction, theta_vector(model, theta0),
                ad_level=str(spec.option("ad_level", "1%")),
                min_reps=int(spec.option("min_reps", 100)))
        elif spec.kind == "rate-separation":
            estimator = spec.option("estimator", "vb")
            estimates = {n: _stack(results, estimator, n)
                         for n in config.sizes}
            prediction = glmm_asymptotic_prediction(model, theta0)
            reports[spec.kind] = rate_separation_glmm(
                estimates, model.group_size, truth_natural,
                prediction=prediction,
                band=float(spec.option("band", 0.2)),
                level_band=float(spec.option("level_band", 0.3)),
                names=names)
        elif spec.kind == "underdispersion":
            reports[spec.kind] = _underdispersion_over_reps(
                config, results, names)
    return reports


def _underdispersion_over_reps(config, results, names) -> CheckReport:
    """Median per-coordinate VB/reference variance ratio across reps."""
    min_ess = 1000.0
    ratios = []
    long_rows = []
    shortfalls = []
    for r in results:
        if "vb_factor_sds" not in r or "sampler_factor_var" not in r:
            continue
        ess = np.asarray(r["sampler_ess"], dtype=float)
        if float(ess.min()) < min_ess:
            shortfalls.append((r["n"], r["rep"], float(ess.min())))
            continue
        vb_var = np.asarray(r["vb_factor_sds"], dtype=float) ** 2
        ref_var = np.asarray(r["sampler_factor_var"], dtype=float)
        ratio = vb_var / ref_var
        ratios.append(ratio)
        for j, name in enumerate(names):
            long_rows.append((r["n"], r["rep"], name, float(ratio[j])))
    if not ratios:
        raise ExperimentError(
            "underdispersion check found no usable replications")
    ratios = np.asarray(ratios)
    medians = np.median(ratios, axis=0)
    passed = bool(np.all(medians <= 1.0)) and not shortfalls
    stats = {
        "median_ratio": {names[j]: float(medians[j])
                         for j in range(len(names))},
        "replications_used": int(ratios.shape[0]),
        "ess_shortfalls": [list(s) for s in shortfalls],
    }
    return CheckReport("underdispersion", list(names), stats,
                       {"max_median_ratio": 1.0}, passed, long_rows)


# ---------------------------------------------------------------------------
# the sweep


def resolve_jobs(cli_jobs=None, config_jobs=None) -> int:
    if cli_jobs is not None:
        return max(1, int(cli_jobs))
    if config_jobs is not None:
        return max(1, int(config_jobs))
    env = os.environ.get("VBLAB_JOBS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def run_experiment(config: ExperimentConfig, output=None,
                   jobs=None) -> ExperimentReport:
    """Full sweep: every (n, rep), then checks, then atomic outputs.

    Writes records.csv, report.json, and the JSON config mirror into the
    output directory. More than ten percent failed replications aborts
    with an error; individual failures are recorded and skipped.
    """
    start = time.time()
    out_dir = output or config.output
    jobs = resolve_jobs(jobs, config.jobs)
    tasks = [(n, rep) for n in config.sizes
             for rep in range(config.replications)]

    if jobs > 1:
        payload = [(config.to_dict(), n, rep) for n, rep in tasks]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_worker, payload, chunksize=1))
    else:
        results = [_worker((config.to_dict(), n, rep)) for n, rep in tasks]

    results.sort(key=lambda r: (r["n"], r["rep"]))
    failures = [{"n": r["n"], "rep": r["rep"], "reason": r["error"]}
                for r in results if "error" in r]
    good = [r for r in results if "error" not in r]
    if len(failures) > FAILURE_LIMIT * len(tasks):
        raise ExperimentError(
            f"{len(failures)} of {len(tasks)} replications failed; first: "
            f"{failures[0]['reason']}")

    model = config.build_model()
    names = tuple(coord_names(model, natural=True))
    truth = theta_vector(model, config.build_theta0(), natural=True)
    records = []
    for r in good:
        for estimator in config.estimators:
            if estimator not in r:
                continue
            values = r[estimator]
            secs = r.get(f"{estimator}_seconds", 0.0)
            for j, name in enumerate(names):
                records.append((r["n"], r["rep"], estimator, name,
                                float(values[j]),
                                float(values[j] - truth[j]), secs))

    checks = _run_checks(config, good)
    report = ExperimentReport(config, records, checks, failures,
                              time.time() - start)
    if out_dir:
        save_records_csv(records, os.path.join(out_dir, "records.csv"))
        payload = report.to_dict()
        _atomic_write(os.path.join(out_dir, "report.json"),
                      lambda fh: (json.dump(payload, fh, indent=2,
                                            sort_keys=True),
                                  fh.write("\n")))
        from .config import emit_config
        emit_config(config, os.path.join(out_dir, "config.json"))
    return report
