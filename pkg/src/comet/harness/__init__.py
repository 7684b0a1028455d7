"""Experiment harness: config files, single runs, sweeps, ablations, CLI."""

from .config import ABLATION_FLAGS, ABLATION_LABELS, ConfigError, RunConfig, fingerprint, parse_config_file, resolve_config
from .report import RunReport, load_model, save_model
from .runner import SweepSpec, ablate, evaluate_model, run, sweep_noise

__all__ = [
    "ABLATION_FLAGS",
    "ABLATION_LABELS",
    "ConfigError",
    "RunConfig",
    "RunReport",
    "SweepSpec",
    "ablate",
    "evaluate_model",
    "fingerprint",
    "load_model",
    "parse_config_file",
    "resolve_config",
    "run",
    "save_model",
    "sweep_noise",
]
