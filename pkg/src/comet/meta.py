"""Confidence-weighted meta-learning training driver.

Every epoch the driver refreshes per-sample confidence weights from the
current parameters, partitions the training set into disjoint tasks, adapts a
copy of the parameters on each task in turn (inner loop), and applies one
meta update per task (outer loop, first-order: the meta gradient is evaluated
at the adapted parameters and applied to the shared ones). The aligned
(train, val) losses collected across inner steps drive the covariance-based
adaptive L2 coefficient.

Ablation flags reduce the driver exactly: disabling meta-learning collapses
the loop to plain gradient descent on the weighted loss over the full set;
disabling the data weighting pins all weights to 1; disabling the model
regularization pins lambda to lambda0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .diffcore import Gradient, NonFiniteError, ParamSet, Tensor, value_and_gradient
from .scl import (
    LossPairSeries,
    confidence_weights,
    series_det,
)

__all__ = [
    "TaskSplit",
    "TrainConfig",
    "EpochRecord",
    "DivergenceError",
    "partition_tasks",
    "outer_step",
    "CoMetTrainer",
]

DIVERGENCE_LIMIT = 1e12


class DivergenceError(RuntimeError):
    """Training loss became non-finite or exceeded the divergence limit."""

    def __init__(self, message: str, epoch: int, task: int | None = None, step: int | None = None,
                 records: list | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.task = task
        self.step = step
        self.records = records or []


@dataclass(frozen=True)
class TaskSplit:
    """Disjoint index sets covering all training samples."""

    n: int
    tasks: tuple[np.ndarray, ...]
    seed: int

    def __post_init__(self):
        frozen = []
        for task in self.tasks:
            arr = np.array(task, dtype=np.int64)
            arr.flags.writeable = False
            frozen.append(arr)
        object.__setattr__(self, "tasks", tuple(frozen))


def partition_tasks(num_samples: int, n: int, seed: int) -> TaskSplit:
    """Random permutation chunked into n near-equal disjoint tasks.

    Sizes differ by at most one; any remainder goes to the leading tasks.
    """
    if n < 2:
        raise ValueError("need at least two tasks")
    if n > num_samples:
        raise ValueError("cannot have more tasks than samples")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(num_samples)
    base, remainder = divmod(num_samples, n)
    tasks = []
    start = 0
    for i in range(n):
        size = base + (1 if i < remainder else 0)
        tasks.append(perm[start : start + size])
        start += size
    return TaskSplit(n=n, tasks=tuple(tasks), seed=seed)


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1e-4
    beta: float = 2e-4
    epochs: int = 50
    batch_size: int = 0  # 0 = full-task gradients
    n_tasks: int = 4
    inner_steps: int = 4
    kappa: float = 1.5
    lambda0: float = 1e-4
    gamma: float = 1.0
    seed: int = 0
    backbone: str = "nf"
    disable_ml: bool = False
    disable_scl_data: bool = False
    disable_scl_model: bool = False
    repartition_each_epoch: bool = True
    outer_update: str = "per_task"  # or "epoch_mean"

    def __post_init__(self):
        problems = self.validate()
        if problems:
            raise ValueError("; ".join(problems))

    def validate(self) -> list[str]:
        problems = []
        if self.alpha <= 0:
            problems.append("alpha must be positive")
        if self.beta <= 0:
            problems.append("beta must be positive")
        if self.epochs < 0:
            problems.append("epochs must be nonnegative")
        if self.batch_size < 0:
            problems.append("batch_size must be nonnegative (0 = full task)")
        if self.n_tasks < 2:
            problems.append("n_tasks must be >= 2")
        min_steps = 1 if self.disable_ml else 2
        if self.inner_steps < min_steps:
            problems.append(
                f"inner_steps must be >= {min_steps}"
                + ("" if self.disable_ml else " (covariance needs two pairs)")
            )
        if self.kappa < 0:
            problems.append("kappa must be nonnegative")
        if self.lambda0 < 0:
            problems.append("lambda0 must be nonnegative")
        if self.gamma < 0:
            problems.append("gamma must be nonnegative")
        if self.backbone not in ("nf", "sn"):
            problems.append(f"backbone must be one of nf, sn (got '{self.backbone}')")
        if self.outer_update not in ("per_task", "epoch_mean"):
            problems.append("outer_update must be per_task or epoch_mean")
        return problems


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    det_sigma: float
    lam: float
    weight_min: float
    weight_median: float
    weight_frac_below_1: float

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "det_sigma": self.det_sigma,
            "lam": self.lam,
            "weight_min": self.weight_min,
            "weight_median": self.weight_median,
            "weight_frac_below_1": self.weight_frac_below_1,
        }


def outer_step(params: ParamSet, grad: Gradient, beta: float) -> ParamSet:
    """One descent step: theta <- theta - beta * grad."""
    if not grad.matches(params):
        raise ValueError("gradient does not match parameter shapes")
    return ParamSet({name: value - beta * grad[name] for name, value in params.entries.items()})


def _sq_norm_t(pt: Mapping[str, Tensor]) -> Tensor:
    acc = None
    for tensor in pt.values():
        term = (tensor * tensor).sum()
        acc = term if acc is None else acc + term
    return acc


class CoMetTrainer:
    """Drives one backbone through confidence-weighted (meta-)training."""

    def __init__(self, backbone, cfg: TrainConfig, collect_weights: bool = False):
        self.backbone = backbone
        self.cfg = cfg
        self.collect_weights = collect_weights
        self.weight_history: list[np.ndarray] = []

    # -- loss builders -------------------------------------------------------

    def _weighted_loss_fn(self, feats: np.ndarray, weights: np.ndarray, lam: float, noise):
        """Scalar loss: sum_i w_i * L_i(theta) + lam * ||theta||^2."""

        def fn(pt: Mapping[str, Tensor], _inputs) -> Tensor:
            losses = self.backbone.per_sample_loss(pt, feats, noise)
            total = (losses * Tensor(weights)).sum()
            return total + _sq_norm_t(pt) * lam

        return fn

    def _data_mean(self, params: ParamSet, feats: np.ndarray, weights: np.ndarray, noise) -> float:
        fn = self._weighted_loss_fn(feats, weights, 0.0, noise)
        pt = {k: Tensor(v) for k, v in params.entries.items()}
        return float(fn(pt, None).data) / feats.shape[0]

    def _guard(self, value: float, epoch: int, task: int | None, step: int | None, records):
        if not np.isfinite(value) or abs(value) > DIVERGENCE_LIMIT:
            raise DivergenceError(
                f"loss diverged to {value} (epoch {epoch}, task {task}, step {step})",
                epoch=epoch, task=task, step=step, records=records,
            )

    # -- inner loop ------------------------------------------------------------

    def inner_adapt(
        self,
        params: ParamSet,
        task_idx: np.ndarray,
        val_idx: np.ndarray,
        prepared: np.ndarray,
        weights: np.ndarray,
        lam: float,
        rng: np.random.Generator,
        epoch: int = 0,
        task_no: int | None = None,
        records: list | None = None,
    ) -> tuple[ParamSet, LossPairSeries]:
        """Adapt a copy of `params` on one task with inner_steps descent steps.

        After each step the validation loss over all remaining tasks is
        evaluated (no gradient), giving one aligned (train, val) pair per
        step: the train entry is the weighted mean task loss used for the
        step, the val entry is the weighted mean loss of the freshly updated
        parameters on the held-out samples.
        """
        cfg = self.cfg
        adapted = params
        pairs = []
        val_feats = prepared[val_idx]
        val_weights = weights[val_idx]
        for step in range(cfg.inner_steps):
            if 0 < cfg.batch_size < task_idx.size:
                chosen = rng.choice(task_idx, size=cfg.batch_size, replace=False)
            else:
                chosen = task_idx
            feats = prepared[chosen]
            step_weights = weights[chosen]
            noise = self.backbone.draw_noise(rng, feats.shape[0])
            loss_fn = self._weighted_loss_fn(feats, step_weights, lam, noise)
            try:
                value, grad = value_and_gradient(loss_fn, adapted)
            except NonFiniteError as exc:
                raise DivergenceError(
                    f"non-finite loss in op '{exc.op}' (epoch {epoch}, task {task_no}, step {step})",
                    epoch=epoch, task=task_no, step=step, records=records,
                ) from exc
            self._guard(value, epoch, task_no, step, records)
            train_mean = (value - lam * adapted.sq_norm()) / feats.shape[0]
            adapted = outer_step(adapted, grad, cfg.alpha)
            val_noise = self.backbone.draw_noise(rng, val_feats.shape[0])
            val_mean = self._data_mean(adapted, val_feats, val_weights, val_noise)
            self._guard(val_mean, epoch, task_no, step, records)
            pairs.append((train_mean, val_mean))
        return adapted, LossPairSeries.from_pairs(pairs)

    # -- meta objective ----------------------------------------------------------

    def _meta_weights_and_lambda(
        self, adapted: ParamSet, raw_features: np.ndarray, series: LossPairSeries, epoch: int
    ) -> tuple[np.ndarray, float, float]:
        cfg = self.cfg
        if cfg.disable_scl_data:
            meta_weights = np.ones(raw_features.shape[0])
        else:
            scores = self.backbone.scores(adapted, raw_features)
            meta_weights = confidence_weights(scores, cfg.kappa, epoch=epoch).weights
        det = series_det(series)
        lam = cfg.lambda0 if cfg.disable_scl_model else cfg.lambda0 * (1.0 + cfg.gamma * det)
        return meta_weights, lam, det

    def meta_objective(
        self,
        adapted: ParamSet,
        raw_features: np.ndarray,
        series: LossPairSeries,
        rng: np.random.Generator,
        epoch: int = 0,
    ) -> float:
        """Value of the meta loss at the adapted parameters.

        Confidence weights are recomputed with the adapted parameters and the
        regularizer uses the covariance of the task's loss series.
        """
        weights, lam, _ = self._meta_weights_and_lambda(adapted, raw_features, series, epoch)
        prepared = self.backbone.prepare(raw_features)
        noise = self.backbone.draw_noise(rng, prepared.shape[0])
        fn = self._weighted_loss_fn(prepared, weights, lam, noise)
        pt = {k: Tensor(v) for k, v in adapted.entries.items()}
        return float(fn(pt, None).data)

    # -- top-level loop -------------------------------------------------------------

    def train(self, features: np.ndarray, initial_params: ParamSet | None = None
              ) -> tuple[ParamSet, list[EpochRecord]]:
        """Run the configured number of epochs and return final parameters.

        Deterministic for a fixed config: parameter initialization, task
        partitions, and perturbation noise all derive from disjoint streams
        seeded by cfg.seed.
        """
        cfg = self.cfg
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] < cfg.n_tasks:
            raise ValueError("features must be 2-D with at least n_tasks rows")
        root = np.random.SeedSequence(cfg.seed)
        ss_init, ss_partition, ss_noise = root.spawn(3)
        rng_partition = np.random.default_rng(ss_partition)
        rng_noise = np.random.default_rng(ss_noise)

        params = initial_params or self.backbone.init_params(int(ss_init.generate_state(1)[0]))
        prepared = self.backbone.prepare(features)
        n = features.shape[0]
        records: list[EpochRecord] = []
        self.weight_history = []
        lam = cfg.lambda0
        split: TaskSplit | None = None

        for epoch in range(cfg.epochs):
            if cfg.disable_scl_data:
                weights = np.ones(n)
            else:
                scores = self.backbone.scores(params, features)
                weights = confidence_weights(scores, cfg.kappa, epoch=epoch).weights
            weight_stats = (
                float(weights.min()),
                float(np.median(weights)),
                float(np.mean(weights < 1.0)),
            )
            if self.collect_weights:
                self.weight_history.append(weights.copy())

            if cfg.disable_ml:
                params, record = self._plain_epoch(
                    params, prepared, weights, epoch, weight_stats, rng_noise, records
                )
                lam = cfg.lambda0
            else:
                if split is None or cfg.repartition_each_epoch:
                    part_seed = int(rng_partition.integers(0, 2**63 - 1))
                    split = partition_tasks(n, cfg.n_tasks, part_seed)
                params, record, lam = self._meta_epoch(
                    params, features, prepared, weights, split, lam, epoch, weight_stats,
                    rng_noise, records,
                )
            records.append(record)
        return params, records

    def _plain_epoch(self, params, prepared, weights, epoch, weight_stats, rng, records):
        """Gradient descent on the weighted loss over the full set.

        Train and validation coincide here, so the loss covariance is
        identically zero and the regularizer stays at lambda0.
        """
        cfg = self.cfg
        lam = cfg.lambda0
        train_mean = 0.0
        for step in range(cfg.inner_steps):
            noise = self.backbone.draw_noise(rng, prepared.shape[0])
            loss_fn = self._weighted_loss_fn(prepared, weights, lam, noise)
            try:
                value, grad = value_and_gradient(loss_fn, params)
            except NonFiniteError as exc:
                raise DivergenceError(
                    f"non-finite loss in op '{exc.op}' (epoch {epoch}, step {step})",
                    epoch=epoch, step=step, records=records,
                ) from exc
            self._guard(value, epoch, None, step, records)
            train_mean = (value - lam * params.sq_norm()) / prepared.shape[0]
            params = outer_step(params, grad, cfg.beta)
        record = EpochRecord(
            epoch=epoch,
            train_loss=train_mean,
            val_loss=train_mean,
            det_sigma=0.0,
            lam=lam,
            weight_min=weight_stats[0],
            weight_median=weight_stats[1],
            weight_frac_below_1=weight_stats[2],
        )
        return params, record

    def _meta_epoch(
        self, params, features, prepared, weights, split, lam, epoch, weight_stats, rng, records
    ):
        cfg = self.cfg
        all_idx = np.arange(features.shape[0])
        train_means: list[float] = []
        val_means: list[float] = []
        dets: list[float] = []
        pending: list[Gradient] = []

        for task_no, task_idx in enumerate(split.tasks):
            in_task = np.zeros(features.shape[0], dtype=bool)
            in_task[task_idx] = True
            val_idx = all_idx[~in_task]
            adapted, series = self.inner_adapt(
                params, task_idx, val_idx, prepared, weights, lam, rng,
                epoch=epoch, task_no=task_no, records=records,
            )
            meta_weights, task_lam, det = self._meta_weights_and_lambda(
                adapted, features, series, epoch
            )
            noise = self.backbone.draw_noise(rng, prepared.shape[0])
            meta_fn = self._weighted_loss_fn(prepared, meta_weights, task_lam, noise)
            try:
                value, grad = value_and_gradient(meta_fn, adapted)
            except NonFiniteError as exc:
                raise DivergenceError(
                    f"non-finite meta loss in op '{exc.op}' (epoch {epoch}, task {task_no})",
                    epoch=epoch, task=task_no, records=records,
                ) from exc
            self._guard(value, epoch, task_no, None, records)
            if cfg.outer_update == "per_task":
                params = outer_step(params, grad, cfg.beta)
            else:
                pending.append(grad)
            lam = task_lam
            dets.append(det)
            train_means.append(float(series.train.mean()))
            val_means.append(float(series.val.mean()))

        if pending:
            mean_grad = Gradient(
                {
                    name: np.mean([g[name] for g in pending], axis=0)
                    for name in pending[0].entries
                }
            )
            params = outer_step(params, mean_grad, cfg.beta)

        record = EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(train_means)),
            val_loss=float(np.mean(val_means)),
            det_sigma=float(np.mean(dets)),
            lam=lam,
            weight_min=weight_stats[0],
            weight_median=weight_stats[1],
            weight_frac_below_1=weight_stats[2],
        )
        return params, record, lam
