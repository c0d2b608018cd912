"""Replication harness: configs, sweeps, reports, and the CLI."""

from .config import (
    CheckSpec,
    ConfigError,
    ExperimentConfig,
    SamplerSpec,
    config_from_dict,
    emit_config,
    load_config,
)
from .run import (
    ExperimentError,
    ExperimentReport,
    records_equal_ignoring_time,
    resolve_jobs,
    run_experiment,
    run_replication,
    save_records_csv,
)

__all__ = [
    "CheckSpec",
    "ConfigError",
    "ExperimentConfig",
    "ExperimentError",
    "ExperimentReport",
    "SamplerSpec",
    "config_from_dict",
    "emit_config",
    "load_config",
    "records_equal_ignoring_time",
    "resolve_jobs",
    "run_experiment",
    "run_replication",
    "save_records_csv",
]
