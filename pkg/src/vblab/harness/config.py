"""Experiment configuration: TOML or JSON in, validated dataclass out.

The on-disk schema is versioned. Loading normalizes everything to plain
Python scalars and tuples, so two configs compare equal exactly when their
emitted forms are identical, and emit followed by load is the identity.
Validation errors name the offending key path.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import tomli

from ..models import Model, model_from_dict, theta_from_dict

CONFIG_SCHEMA_VERSION = 1
KNOWN_ESTIMATORS = ("vb", "vfe", "sampler")
KNOWN_CHECKS = ("consistency", "normality", "rate-separation",
                "underdispersion")


class ConfigError(ValueError):
    """Malformed experiment configuration."""


def _freeze(value):
    """Plain scalars, tuples, and dicts only, recursively."""
    if isinstance(value, dict):
        return {str(k): _freeze(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return tuple(_freeze(v) for v in value)
    if isinstance(value, bool | int | float | str) or value is None:
        return value
    raise ConfigError(f"unsupported config value {value!r}")


def _thaw(value):
    if isinstance(value, dict):
        return {k: _thaw(v) for k, v in value.items()}
    if isinstance(value, tuple):
        return [_thaw(v) for v in value]
    return value


@dataclass(frozen=True)
class CheckSpec:
    kind: str
    options: tuple = ()

    def option(self, name, default=None):
        return dict(self.options).get(name, default)


@dataclass(frozen=True)
class SamplerSpec:
    steps: int = 100000
    burn_in: int = 20000
    thin: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    model_spec: dict
    theta0_spec: dict
    sizes: tuple
    replications: int
    seed: int
    estimators: tuple = ("vb", "vfe")
    checks: tuple = ()
    sampler: SamplerSpec = None
    output: str = None
    jobs: int = None
    schema_version: int = CONFIG_SCHEMA_VERSION

    def build_model(self) -> Model:
        return model_from_dict(_thaw(self.model_spec))

    def build_theta0(self):
        return theta_from_dict(self.build_model(), _thaw(self.theta0_spec))

    def to_dict(self) -> dict:
        out = {
            "schema_version": self.schema_version,
            "name": self.name,
            "seed": self.seed,
            "model": _thaw(self.model_spec),
            "truth": _thaw(self.theta0_spec),
            "grid": {"sizes": list(self.sizes),
                     "replications": self.replications},
            "estimators": list(self.estimators),
            "checks": [{"kind": c.kind, **dict(_thaw(c.options))}
                       for c in self.checks],
        }
        if self.sampler is not None:
            out["sampler"] = {"steps": self.sampler.steps,
                              "burn_in": self.sampler.burn_in,
                              "thin": self.sampler.thin}
        if self.output is not None:
            out["output"] = self.output
        if self.jobs is not None:
            out["jobs"] = self.jobs
        return out


def _require(cond, path, message):
    if not cond:
        raise ConfigError(f"{path}: {message}")


def _reject_strays(table, known, path):
    # A key that lands in the wrong table (easy to do in TOML, where every
    # top-level key after a [header] joins that table) must not be dropped
    # on the floor; the run would silently use the default instead.
    strays = [k for k in table if k not in known]
    if strays:
        raise ConfigError(f"{path}: unknown key {strays[0]!r}; "
                          f"expected one of {sorted(known)}")


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("top level: expected a table")
    _reject_strays(raw, {"schema_version", "name", "seed", "model", "truth",
                         "grid", "estimators", "checks", "sampler", "output",
                         "jobs"}, "top level")
    version = raw.get("schema_version", CONFIG_SCHEMA_VERSION)
    _require(version == CONFIG_SCHEMA_VERSION, "schema_version",
             f"unsupported value {version!r}; this build reads "
             f"{CONFIG_SCHEMA_VERSION}")
    _require("model" in raw, "model", "missing table")
    _require("truth" in raw, "truth", "missing table")
    grid = raw.get("grid", {})
    _require(isinstance(grid, dict), "grid", "expected a table")
    _reject_strays(grid, {"sizes", "replications"}, "grid")
    sizes = grid.get("sizes", ())
    _require(len(sizes) > 0, "grid.sizes", "must be non-empty")
    _require(all(int(n) > 0 for n in sizes), "grid.sizes",
             "sizes must be positive")
    reps = int(grid.get("replications", 1))
    _require(reps >= 1, "grid.replications", "must be at least 1")

    estimators = tuple(raw.get("estimators", ("vb", "vfe")))
    for e in estimators:
        _require(e in KNOWN_ESTIMATORS, "estimators",
                 f"unknown estimator {e!r}; choose from {KNOWN_ESTIMATORS}")
    _require(len(estimators) == len(set(estimators)), "estimators",
             "estimators must be unique")

    checks = []
    for i, entry in enumerate(raw.get("checks", ())):
        _require(isinstance(entry, dict), f"checks[{i}]", "expected a table")
        kind = entry.get("kind")
        _require(kind in KNOWN_CHECKS, f"checks[{i}].kind",
                 f"unknown check {kind!r}; choose from {KNOWN_CHECKS}")
        options = {k: v for k, v in entry.items() if k != "kind"}
        for band_key in ("band", "level_band"):
            if band_key in options:
                _require(float(options[band_key]) >= 0,
                         f"checks[{i}].{band_key}", "band must be nonnegative")
        if "bands" in options:
            lo, hi = options["bands"]
            _require(lo <= hi, f"checks[{i}].bands", "need lo <= hi")
        checks.append(CheckSpec(kind, tuple(sorted(_freeze(options).items()))))

    sampler = None
    if "sampler" in raw or "sampler" in estimators:
        sraw = raw.get("sampler", {})
        _require(isinstance(sraw, dict), "sampler", "expected a table")
        _reject_strays(sraw, {"steps", "burn_in", "thin"}, "sampler")
        sampler = SamplerSpec(int(sraw.get("steps", 100000)),
                              int(sraw.get("burn_in", 20000)),
                              int(sraw.get("thin", 1)))
        _require(sampler.steps > sampler.burn_in >= 0, "sampler.steps",
                 "need steps > burn_in >= 0")
        _require(sampler.thin >= 1, "sampler.thin", "must be at least 1")

    jobs = raw.get("jobs")
    if jobs is not None:
        jobs = int(jobs)
        _require(jobs >= 1, "jobs", "must be at least 1")

    cfg = ExperimentConfig(
        name=str(raw.get("name", "experiment")),
        model_spec=_freeze(raw["model"]),
        theta0_spec=_freeze(raw["truth"]),
        sizes=tuple(int(n) for n in sizes),
        replications=reps,
        seed=int(raw.get("seed", 0)),
        estimators=estimators,
        checks=tuple(checks),
        sampler=sampler,
        output=raw.get("output"),
        jobs=jobs,
        schema_version=CONFIG_SCHEMA_VERSION,
    )
    try:
        cfg.build_model()
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from None
    try:
        theta = cfg.build_theta0()
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"truth: {exc}") from None
    _require(theta is not None, "truth", "must define the true parameters")
    return cfg


def load_config(path) -> ExperimentConfig:
    """Parse a .toml or .json experiment config file."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    text = open(path, "rb").read()
    if str(path).endswith(".json"):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} line {exc.lineno}: {exc.msg}") from None
    else:
        try:
            raw = tomli.loads(text.decode("utf-8"))
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    try:
        return config_from_dict(raw)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def emit_config(config: ExperimentConfig, path) -> None:
    """Write the JSON mirror of a config; load_config inverts it."""
    with open(path, "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
