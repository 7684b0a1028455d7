"""Run reports and model serialization with deterministic JSON output."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..diffcore import ParamSet
from ..meta import EpochRecord
from ..metrics import EvalResult

__all__ = ["RunReport", "dump_json", "save_model", "load_model"]

REPORT_SCHEMA_VERSION = 1


def dump_json(payload: dict, path) -> None:
    """Write JSON with sorted keys and a trailing newline (byte-stable)."""
    text = json.dumps(payload, sort_keys=True, indent=2)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text + "\n")


@dataclass
class RunReport:
    fingerprint: str
    seed: int
    config: dict
    epochs: list[EpochRecord]
    result: EvalResult | None
    wall_seconds: float
    error: str | None = None
    weights_per_epoch: list | None = None
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_dict(self) -> dict:
        payload = {
            "schema_version": self.schema_version,
            "fingerprint": self.fingerprint,
            "seed": self.seed,
            "config": self.config,
            "epochs": [r.to_dict() for r in self.epochs],
            "result": self.result.to_dict() if self.result is not None else None,
            "wall_seconds": self.wall_seconds,
        }
        if self.error is not None:
            payload["error"] = self.error
        if self.weights_per_epoch is not None:
            payload["weights_per_epoch"] = self.weights_per_epoch
        return payload

    def save(self, path) -> None:
        dump_json(self.to_dict(), path)


def save_model(params: ParamSet, model_config: dict, input_dim: int, path) -> None:
    payload = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "input_dim": input_dim,
        "model_config": model_config,
        "params": {name: arr.tolist() for name, arr in params.entries.items()},
    }
    dump_json(payload, path)


def load_model(path) -> tuple[ParamSet, dict, int]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    params = ParamSet(
        {name: np.asarray(value, dtype=np.float64) for name, value in payload["params"].items()}
    )
    return params, payload["model_config"], payload["input_dim"]
