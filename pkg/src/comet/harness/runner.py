"""Experiment orchestration: single runs, noise sweeps, and ablation suites.

Sweep and ablation cells are cached under <out>/cells keyed by the config
fingerprint, so interrupted suites resume without recomputation and repeated
invocations are idempotent. Cells may run in parallel; output ordering is
fixed by sorting on (configuration, noise, seed), never completion order.
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..data import FeatureDataset, LABEL_UNKNOWN, generate, load_features
from ..meta import CoMetTrainer, DivergenceError
from ..metrics import evaluate_scores
from .config import ABLATION_FLAGS, ABLATION_LABELS, RunConfig, fingerprint, resolve_config
from .report import RunReport, dump_json, load_model, save_model

__all__ = ["SweepSpec", "run", "evaluate_model", "sweep_noise", "ablate"]


@dataclass(frozen=True)
class SweepSpec:
    noise_levels: tuple[float, ...] = (0.0, 0.02, 0.05, 0.10)
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    configurations: tuple[str, ...] = ("baseline", "full")

    def __post_init__(self):
        levels = list(self.noise_levels)
        if sorted(levels) != levels or any(not 0.0 <= x <= 0.5 for x in levels):
            raise ValueError("noise levels must be ascending values in [0, 0.5]")
        for name in self.configurations:
            if name not in ABLATION_FLAGS:
                raise ValueError(f"unknown configuration '{name}'")

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "SweepSpec":
        return cls(
            noise_levels=tuple(cfg["sweep_noise_levels"]),
            seeds=tuple(cfg["sweep_seeds"]),
            configurations=tuple(cfg["sweep_configurations"]),
        )


def _load_datasets(cfg: RunConfig) -> tuple[FeatureDataset, FeatureDataset]:
    if cfg["data_path_train"]:
        train = load_features(cfg["data_path_train"])
        test = load_features(cfg["data_path_test"]) if cfg["data_path_test"] else None
        if test is None:
            raise ValueError("data_path_test is required when data_path_train is set")
        return train, test
    return generate(cfg.generator_config())


def run(cfg: RunConfig, out_dir=None, record_weights: bool | None = None) -> RunReport:
    """Generate or load data, train, evaluate, and optionally persist.

    On divergence the partial report (epochs so far, no metrics) is still
    written before the exception propagates.
    """
    started = time.perf_counter()
    train_set, test_set = _load_datasets(cfg)
    backbone = cfg.build_backbone(train_set.dim)
    collect = cfg["record_weights"] if record_weights is None else record_weights
    trainer = CoMetTrainer(backbone, cfg.train_config(), collect_weights=collect)
    fp = fingerprint(cfg)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    # Training sees features only; labels stay behind for evaluation.
    features = train_set.features.astype(np.float64)
    try:
        params, records = trainer.train(features)
    except DivergenceError as exc:
        if out_dir is not None:
            RunReport(
                fingerprint=fp,
                seed=cfg["seed"],
                config=dict(cfg.values),
                epochs=exc.records,
                result=None,
                wall_seconds=time.perf_counter() - started,
                error=str(exc),
            ).save(out_dir / "report.json")
        raise

    known = test_set.eval_labels != LABEL_UNKNOWN
    scores = backbone.scores(params, test_set.features[known].astype(np.float64))
    result = evaluate_scores(scores, test_set.eval_labels[known].astype(np.int64))

    weights_log = None
    if collect:
        weights_log = [
            {"epoch": i, "weights": [round(float(w), 6) for w in epoch_weights]}
            for i, epoch_weights in enumerate(trainer.weight_history)
        ]
    report = RunReport(
        fingerprint=fp,
        seed=cfg["seed"],
        config=dict(cfg.values),
        epochs=records,
        result=result,
        wall_seconds=time.perf_counter() - started,
        weights_per_epoch=weights_log,
    )
    if out_dir is not None:
        report.save(out_dir / "report.json")
        save_model(params, cfg.model_config_dict(), train_set.dim, out_dir / "model.json")
    return report


def evaluate_model(model_path, data_path) -> dict:
    """Score a saved model on a .cmft dataset and compute image metrics."""
    params, model_config, input_dim = load_model(model_path)
    cfg = resolve_config(file_values=model_config, apply_env=False)
    backbone = cfg.build_backbone(input_dim)
    dataset = load_features(data_path)
    known = dataset.eval_labels != LABEL_UNKNOWN
    scores = backbone.scores(params, dataset.features[known].astype(np.float64))
    result = evaluate_scores(scores, dataset.eval_labels[known].astype(np.int64))
    return result.to_dict()


# ---------------------------------------------------------------------------
# Suite cells
# ---------------------------------------------------------------------------


def _cell_config(base: RunConfig, configuration: str, noise: float, seed: int) -> RunConfig:
    values = dict(base.values)
    values.update(ABLATION_FLAGS[configuration])
    values["data_contamination"] = noise
    values["seed"] = seed
    values["data_seed"] = seed
    return resolve_config(file_values=values, apply_env=False)


def _run_cell(args: tuple[dict, str, float, int]) -> dict:
    """Worker entry: train one cell and return its row (importable for spawn)."""
    base_values, configuration, noise, seed = args
    cell = _cell_config(RunConfig(values=base_values), configuration, noise, seed)
    row = {
        "configuration": ABLATION_LABELS[configuration],
        "noise": noise,
        "seed": seed,
        "fingerprint": fingerprint(cell),
    }
    try:
        report = run(cell, out_dir=None)
        row["i_auroc"] = report.result.i_auroc
    except Exception as exc:  # cell failures are recorded, the suite continues
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def _collect_cells(base: RunConfig, cells: list[tuple[str, float, int]], out_dir: Path,
                   workers: int) -> list[dict]:
    cell_dir = out_dir / "cells"
    cell_dir.mkdir(parents=True, exist_ok=True)
    pending = []
    for configuration, noise, seed in cells:
        fp = fingerprint(_cell_config(base, configuration, noise, seed))
        if not (cell_dir / f"{fp}.json").exists():
            pending.append((dict(base.values), configuration, noise, seed))
    if pending:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_run_cell, pending))
        else:
            results = [_run_cell(args) for args in pending]
        for row in results:
            target = cell_dir / f"{row['fingerprint']}.json"
            tmp = target.with_suffix(".tmp")
            dump_json(row, tmp)
            tmp.replace(target)

    rows = []
    for configuration, noise, seed in cells:
        fp = fingerprint(_cell_config(base, configuration, noise, seed))
        path = cell_dir / f"{fp}.json"
        with open(path, "r", encoding="utf-8") as fh:
            rows.append(json.load(fh))
    return rows


def _write_csv(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def sweep_noise(spec: SweepSpec, base: RunConfig, out_dir, workers: int = 1) -> list[dict]:
    """Run every (configuration x noise x seed) cell; emit long CSV + summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = [
        (configuration, noise, seed)
        for configuration in spec.configurations
        for noise in spec.noise_levels
        for seed in spec.seeds
    ]
    rows = _collect_cells(base, cells, out_dir, workers)
    rows.sort(key=lambda r: (r["configuration"], r["noise"], r["seed"]))

    ok_rows = [r for r in rows if "i_auroc" in r]
    _write_csv(
        out_dir / "sweep.csv",
        ["configuration", "noise", "seed", "i_auroc"],
        [[r["configuration"], r["noise"], r["seed"], repr(r["i_auroc"])] for r in ok_rows],
    )
    summary_rows = []
    for configuration in sorted({r["configuration"] for r in ok_rows}):
        for noise in sorted({r["noise"] for r in ok_rows}):
            values = [
                r["i_auroc"]
                for r in ok_rows
                if r["configuration"] == configuration and r["noise"] == noise
            ]
            if values:
                summary_rows.append(
                    [
                        configuration,
                        noise,
                        repr(float(np.mean(values))),
                        repr(float(np.std(values))),
                        len(values),
                    ]
                )
    _write_csv(
        out_dir / "sweep_summary.csv",
        ["configuration", "noise", "mean_i_auroc", "std_i_auroc", "n"],
        summary_rows,
    )
    failures = [r for r in rows if "error" in r]
    if failures:
        dump_json({"failed_cells": failures}, out_dir / "sweep_errors.json")
    return rows


def ablate(base: RunConfig, out_dir, seeds: tuple[int, ...] | None = None,
           workers: int = 1) -> list[dict]:
    """Run the five standard configurations on identical data and seeds."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = tuple(seeds if seeds is not None else base["ablate_seeds"])
    noise = base["data_contamination"]
    cells = [(name, noise, seed) for name in ABLATION_FLAGS for seed in seeds]
    rows = _collect_cells(base, cells, out_dir, workers)

    table = []
    for name in ABLATION_FLAGS:
        label = ABLATION_LABELS[name]
        values = [r["i_auroc"] for r in rows if r["configuration"] == label and "i_auroc" in r]
        if values:
            table.append(
                {
                    "configuration": label,
                    "mean_i_auroc": float(np.mean(values)),
                    "std_i_auroc": float(np.std(values)),
                    "n_seeds": len(values),
                }
            )
    table.sort(key=lambda r: -r["mean_i_auroc"])
    _write_csv(
        out_dir / "ablation.csv",
        ["configuration", "mean_i_auroc", "std_i_auroc", "n_seeds"],
        [
            [r["configuration"], repr(r["mean_i_auroc"]), repr(r["std_i_auroc"]), r["n_seeds"]]
            for r in table
        ],
    )
    failures = [r for r in rows if "error" in r]
    if failures:
        dump_json({"failed_cells": failures}, out_dir / "ablation_errors.json")
    return table


def plot_sweep(rows: list[dict], out_path) -> None:
    """Optional line chart of mean AUROC per configuration across noise."""
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    ok_rows = [r for r in rows if "i_auroc" in r]
    fig, ax = plt.subplots(figsize=(6, 4))
    for configuration in sorted({r["configuration"] for r in ok_rows}):
        noises = sorted({r["noise"] for r in ok_rows if r["configuration"] == configuration})
        means = [
            np.mean(
                [
                    r["i_auroc"]
                    for r in ok_rows
                    if r["configuration"] == configuration and r["noise"] == noise
                ]
            )
            for noise in noises
        ]
        ax.plot([100 * n for n in noises], means, marker="o", label=configuration)
    ax.set_xlabel("training contamination (%)")
    ax.set_ylabel("mean I-AUROC")
    ax.set_ylim(0.0, 1.02)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
