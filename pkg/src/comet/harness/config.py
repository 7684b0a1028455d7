"""Flat key/value run configuration: parsing, validation, fingerprinting.

Config files are plain text, one `key = value` per line, `#` comments,
with a mandatory schema_version. The seed can be overridden per run by the
COMET_SEED environment variable (useful in CI), which takes precedence over
both the file and the --seed flag.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

from ..backbones import (
    CouplingFlow,
    FeatureExtractorStub,
    FlowBackbone,
    SimpleNetBackbone,
    SimpleNetModel,
    augmented_transforms,
    default_transforms,
)
from ..data import ANOMALY_KINDS, GENERATOR_KINDS, GeneratorConfig
from ..meta import TrainConfig

__all__ = ["ConfigError", "RunConfig", "parse_config_file", "resolve_config", "fingerprint"]

SCHEMA_VERSION = 1

ENV_SEED = "COMET_SEED"


class ConfigError(Exception):
    """Invalid configuration; `problems` lists every offending key."""

    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))
        self.problems = problems


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got '{text}'")


def _float_list(text: str) -> list[float]:
    return [float(part) for part in text.split(",") if part.strip()]


def _int_list(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part.strip()]


def _str_list(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


# key -> (parser, default)
_SCHEMA: dict[str, tuple] = {
    "schema_version": (int, SCHEMA_VERSION),
    "seed": (int, 1),
    "backbone": (str, "nf"),
    "epochs": (int, 50),
    "alpha": (float, 1e-4),
    "beta": (float, 2e-4),
    "inner_steps": (int, 4),
    "n_tasks": (int, 4),
    "batch_size": (int, 0),
    "kappa": (float, 1.5),
    "lambda0": (float, 1e-4),
    "gamma": (float, 1.0),
    "disable_ml": (_bool, False),
    "disable_scl_data": (_bool, False),
    "disable_scl_model": (_bool, False),
    "repartition_tasks": (_bool, True),
    "outer_update": (str, "per_task"),
    "record_weights": (_bool, False),
    "flow_layers": (int, 2),
    "flow_hidden": (int, 16),
    "scale_clamp": (float, 2.0),
    "sn_adapter_dim": (int, 0),  # 0 = same as input
    "sn_hidden": (int, 16),
    "sn_truncation": (float, 0.5),
    "sn_noise_std": (float, 0.1),
    "extractor": (str, "identity"),
    "extractor_out_dim": (int, 0),
    "extractor_seed": (int, 0),
    "transforms": (str, "identity"),
    "data_kind": (str, "gaussian-blobs"),
    "data_d": (int, 8),
    "data_n_train": (int, 400),
    "data_n_test": (int, 200),
    "data_n_clusters": (int, 2),
    "data_anomaly": (str, "local-deformation"),
    "data_contamination": (float, 0.10),
    "data_seed": (int, -1),  # -1 = follow seed
    "data_path_train": (str, ""),
    "data_path_test": (str, ""),
    "sweep_noise_levels": (_float_list, [0.0, 0.02, 0.05, 0.10]),
    "sweep_seeds": (_int_list, [1, 2, 3, 4, 5]),
    "sweep_configurations": (_str_list, ["baseline", "full"]),
    "ablate_seeds": (_int_list, [1, 2, 3, 4, 5]),
}

# Short aliases for the five ablation rows; values are TrainConfig overrides.
ABLATION_FLAGS: dict[str, dict[str, bool]] = {
    "baseline": {"disable_ml": True, "disable_scl_data": True, "disable_scl_model": True},
    "no_ml": {"disable_ml": True, "disable_scl_data": False, "disable_scl_model": False},
    "no_scl_data_model": {"disable_ml": False, "disable_scl_data": True, "disable_scl_model": True},
    "no_scl_data": {"disable_ml": False, "disable_scl_data": True, "disable_scl_model": False},
    "full": {"disable_ml": False, "disable_scl_data": False, "disable_scl_model": False},
}

ABLATION_LABELS: dict[str, str] = {
    "baseline": "CoMet w/o SCL and ML (baseline)",
    "no_ml": "CoMet w/o ML",
    "no_scl_data_model": "CoMet w/o SCL on Data & Model",
    "no_scl_data": "CoMet w/o SCL on Data",
    "full": "CoMet (full)",
}


def parse_config_file(path) -> dict:
    """Parse a key/value config file; collects every problem before raising."""
    problems: list[str] = []
    values: dict = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError([f"cannot read config file {path}: {exc}"]) from exc
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            problems.append(f"line {lineno}: expected 'key = value', got '{stripped}'")
            continue
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in _SCHEMA:
            problems.append(f"line {lineno}: unknown key '{key}'")
            continue
        parser, _ = _SCHEMA[key]
        try:
            values[key] = parser(raw)
        except ValueError as exc:
            problems.append(f"line {lineno}: key '{key}': {exc}")
    if problems:
        raise ConfigError(problems)
    return values


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved configuration for a single training run."""

    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            alpha=v["alpha"],
            beta=v["beta"],
            epochs=v["epochs"],
            batch_size=v["batch_size"],
            n_tasks=v["n_tasks"],
            inner_steps=v["inner_steps"],
            kappa=v["kappa"],
            lambda0=v["lambda0"],
            gamma=v["gamma"],
            seed=v["seed"],
            backbone=v["backbone"],
            disable_ml=v["disable_ml"],
            disable_scl_data=v["disable_scl_data"],
            disable_scl_model=v["disable_scl_model"],
            repartition_each_epoch=v["repartition_tasks"],
            outer_update=v["outer_update"],
        )

    def generator_config(self) -> GeneratorConfig:
        v = self.values
        return GeneratorConfig(
            kind=v["data_kind"],
            d=v["data_d"],
            n_train=v["data_n_train"],
            n_test=v["data_n_test"],
            n_clusters=v["data_n_clusters"],
            anomaly_kind=v["data_anomaly"],
            contamination_rate=v["data_contamination"],
            seed=v["seed"] if v["data_seed"] < 0 else v["data_seed"],
        )

    def build_backbone(self, input_dim: int):
        v = self.values
        extractor = self._extractor()
        model_dim = extractor.output_dim(input_dim)
        if v["backbone"] == "nf":
            flow = CouplingFlow(
                input_dim=model_dim,
                num_layers=v["flow_layers"],
                hidden_dim=v["flow_hidden"],
                scale_clamp=v["scale_clamp"],
            )
            if v["transforms"] == "augmented":
                transforms = augmented_transforms(input_dim, seed=v["extractor_seed"])
            else:
                transforms = default_transforms()
            return FlowBackbone(flow, extractor, transforms)
        model = SimpleNetModel(
            input_dim=model_dim,
            adapter_dim=v["sn_adapter_dim"] or None,
            hidden_dim=v["sn_hidden"],
            noise_std=v["sn_noise_std"],
            truncation=v["sn_truncation"],
        )
        return SimpleNetBackbone(model, extractor)

    def _extractor(self) -> FeatureExtractorStub:
        v = self.values
        if v["extractor"] == "identity":
            return FeatureExtractorStub()
        return FeatureExtractorStub(
            mode="random_projection",
            seed=v["extractor_seed"],
            out_dim=v["extractor_out_dim"] or None,
        )

    def model_config_dict(self) -> dict:
        keys = (
            "backbone", "flow_layers", "flow_hidden", "scale_clamp",
            "sn_adapter_dim", "sn_hidden", "sn_truncation", "sn_noise_std",
            "extractor", "extractor_out_dim", "extractor_seed", "transforms",
        )
        return {k: self.values[k] for k in keys}


def resolve_config(
    file_values: dict | None = None,
    overrides: dict | None = None,
    apply_env: bool = True,
) -> RunConfig:
    """Merge defaults, file values, CLI overrides, and the env seed.

    apply_env=False skips the COMET_SEED override; suite cells use it so the
    environment cannot collapse every cell onto one seed.
    """
    problems: list[str] = []
    values = {key: default for key, (_, default) in _SCHEMA.items()}
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            if key not in _SCHEMA:
                problems.append(f"unknown key '{key}'")
            else:
                values[key] = value
    env_seed = os.environ.get(ENV_SEED) if apply_env else None
    if env_seed is not None:
        try:
            values["seed"] = int(env_seed)
        except ValueError:
            problems.append(f"{ENV_SEED} must be an integer, got '{env_seed}'")

    if values["schema_version"] != SCHEMA_VERSION:
        problems.append(
            f"key 'schema_version': unsupported version {values['schema_version']},"
            f" expected {SCHEMA_VERSION}"
        )
    if values["backbone"] not in ("nf", "sn"):
        problems.append(f"key 'backbone': got '{values['backbone']}', allowed values: nf, sn")
    if values["extractor"] not in ("identity", "random_projection"):
        problems.append(
            f"key 'extractor': got '{values['extractor']}',"
            " allowed values: identity, random_projection"
        )
    if values["transforms"] not in ("identity", "augmented"):
        problems.append(
            f"key 'transforms': got '{values['transforms']}', allowed values: identity, augmented"
        )
    if values["data_kind"] not in GENERATOR_KINDS:
        problems.append(
            f"key 'data_kind': got '{values['data_kind']}',"
            f" allowed values: {', '.join(GENERATOR_KINDS)}"
        )
    if values["data_anomaly"] not in ANOMALY_KINDS:
        problems.append(
            f"key 'data_anomaly': got '{values['data_anomaly']}',"
            f" allowed values: {', '.join(ANOMALY_KINDS)}"
        )
    if not 0.0 <= values["data_contamination"] <= 0.5:
        problems.append("key 'data_contamination': must be in [0, 0.5]")
    levels = values["sweep_noise_levels"]
    if sorted(levels) != levels or any(not 0.0 <= x <= 0.5 for x in levels):
        problems.append("key 'sweep_noise_levels': must be ascending values in [0, 0.5]")
    for name in values["sweep_configurations"]:
        if name not in ABLATION_FLAGS:
            problems.append(
                f"key 'sweep_configurations': got '{name}',"
                f" allowed values: {', '.join(ABLATION_FLAGS)}"
            )
    if problems:
        raise ConfigError(problems)

    cfg = RunConfig(values=values)
    train_problems = [f"key '{p}'" for p in _train_problems(cfg)]
    if train_problems:
        raise ConfigError(train_problems)
    return cfg


def _train_problems(cfg: RunConfig) -> list[str]:
    try:
        cfg.train_config()
    except ValueError as exc:
        return str(exc).split("; ")
    return []


def fingerprint(cfg: RunConfig) -> str:
    """Stable hash of everything that affects a run's numbers.

    Sweep lists, output paths, and worker counts are execution details and
    are excluded.
    """
    excluded = {"sweep_noise_levels", "sweep_seeds", "sweep_configurations", "ablate_seeds"}
    payload = {k: v for k, v in cfg.values.items() if k not in excluded}
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
