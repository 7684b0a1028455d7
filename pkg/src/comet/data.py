"""Synthetic feature datasets with controlled anomaly contamination.

Generators produce nominal clusters, rings, or jittered grids; anomalies are
injected by replacing a fixed floor(rate * N) of training rows, so every
contamination level is exactly reproducible. Datasets round-trip through a
small binary format (.cmft) for ingestion of externally extracted features.

Ground-truth labels travel with the features for evaluation bookkeeping only;
the training driver receives bare feature matrices and never sees them.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "LABEL_NOMINAL",
    "LABEL_ANOMALOUS",
    "LABEL_UNKNOWN",
    "FeatureDataset",
    "GeneratorConfig",
    "generate",
    "inject_anomalies",
    "nominal_fence_radius",
    "save_features",
    "load_features",
    "FeatureFileError",
    "BadMagicError",
    "TruncatedFileError",
    "DimOverflowError",
]

LABEL_NOMINAL = 0
LABEL_ANOMALOUS = 1
LABEL_UNKNOWN = 255

GENERATOR_KINDS = ("gaussian-blobs", "ring", "grid-texture")
ANOMALY_KINDS = ("uniform-outlier", "shifted-cluster", "local-deformation")

MAGIC = b"CMFT"
VERSION = 1
_HEADER = struct.Struct("<4sBII")
# Caps the declared payload at 2^27 float32 values (512 MiB) before any
# allocation happens; larger headers are treated as corrupt.
MAX_ELEMENTS = 1 << 27


class FeatureFileError(Exception):
    """Base class for .cmft format errors; `code` names the failure mode."""

    code = "format"


class BadMagicError(FeatureFileError):
    """Leading magic bytes or version byte do not match the format."""

    code = "bad_magic"


class TruncatedFileError(FeatureFileError):
    """File size disagrees with the header (short read or trailing bytes)."""

    code = "truncated"


class DimOverflowError(FeatureFileError):
    """Header declares an implausibly large N x d payload."""

    code = "dim_overflow"


@dataclass(frozen=True)
class FeatureDataset:
    """N x d float32 features plus evaluation-only labels."""

    features: np.ndarray
    eval_labels: np.ndarray
    provenance: dict = field(default_factory=dict)
    contamination_rate: float = 0.0

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float32)
        labels = np.array(self.eval_labels, dtype=np.uint8)
        if features.ndim != 2 or features.shape[0] < 1:
            raise ValueError("features must be a non-empty N x d matrix")
        if labels.shape != (features.shape[0],):
            raise ValueError("eval_labels must have one entry per sample")
        if not np.all(np.isfinite(features)):
            raise ValueError("features must be finite")
        if not np.all(np.isin(labels, (LABEL_NOMINAL, LABEL_ANOMALOUS, LABEL_UNKNOWN))):
            raise ValueError("labels must be 0, 1, or 255")
        if not 0.0 <= self.contamination_rate <= 0.5:
            raise ValueError("contamination_rate must be in [0, 0.5]")
        features.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "eval_labels", labels)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class GeneratorConfig:
    kind: str = "gaussian-blobs"
    d: int = 8
    n_train: int = 400
    n_test: int = 200
    n_clusters: int = 2
    anomaly_kind: str = "local-deformation"
    contamination_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in GENERATOR_KINDS:
            raise ValueError(f"kind must be one of {GENERATOR_KINDS}")
        if self.anomaly_kind not in ANOMALY_KINDS:
            raise ValueError(f"anomaly_kind must be one of {ANOMALY_KINDS}")
        if not 0.0 <= self.contamination_rate <= 0.5:
            raise ValueError("contamination_rate must be in [0, 0.5]")
        if self.d < 1 or self.n_train < 1 or self.n_test < 2:
            raise ValueError("d, n_train must be >= 1 and n_test >= 2")
        if self.n_clusters < 1:
            raise ValueError("n_clusters must be >= 1")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "d": self.d,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "n_clusters": self.n_clusters,
            "anomaly_kind": self.anomaly_kind,
            "contamination_rate": self.contamination_rate,
            "seed": self.seed,
        }


def nominal_fence_radius(d: int, q: float = 0.999) -> float:
    """Radius containing fraction q of a unit isotropic Gaussian in d dims.

    Wilson-Hilferty approximation of the chi-square quantile; used both when
    placing uniform outliers and when auditing them.
    """
    z = {0.999: 3.090232306167813}.get(q)
    if z is None:
        raise ValueError("only q=0.999 is supported")
    chi2 = d * (1.0 - 2.0 / (9.0 * d) + z * math.sqrt(2.0 / (9.0 * d))) ** 3
    return math.sqrt(chi2)


def _nominal_sampler(cfg: GeneratorConfig, rng: np.random.Generator):
    """Returns (sample_fn(n) -> array, centers, cluster_std) for the kind."""
    # Constants keep features near unit scale, which conditions the tanh
    # subnetworks well and matches the default perturbation noise.
    if cfg.kind == "gaussian-blobs":
        centers = rng.uniform(-2.0, 2.0, size=(cfg.n_clusters, cfg.d))
        std = 0.5

        def sample(n: int) -> np.ndarray:
            assignment = rng.integers(0, cfg.n_clusters, size=n)
            return centers[assignment] + rng.normal(0.0, std, size=(n, cfg.d))

        return sample, centers, std

    if cfg.kind == "ring":
        radius = 1.5
        centers = np.zeros((1, cfg.d))
        std = 0.5

        def sample(n: int) -> np.ndarray:
            theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
            x = rng.normal(0.0, 0.15, size=(n, cfg.d))
            x[:, 0] += radius * np.cos(theta)
            if cfg.d > 1:
                x[:, 1] += radius * np.sin(theta)
            return x

        return sample, centers, std

    # grid-texture: jittered points on a small integer lattice
    centers = np.zeros((1, cfg.d))
    std = 0.8

    def sample(n: int) -> np.ndarray:
        lattice = 0.8 * rng.integers(-2, 3, size=(n, cfg.d)).astype(np.float64)
        return lattice + rng.normal(0.0, 0.08, size=(n, cfg.d))

    return sample, centers, std


def _sample_anomalies(
    n: int,
    kind: str,
    centers: np.ndarray,
    cluster_std: float,
    rng: np.random.Generator,
    nominal_pool: np.ndarray,
    anomaly_seed: int = 0,
) -> np.ndarray:
    """Draw anomalous rows. The anomaly *geometry* (ghost-cluster placement,
    deformation pattern) derives from anomaly_seed so that training
    contamination and test anomalies describe the same anomalous process;
    `rng` only drives the per-sample randomness."""
    d = centers.shape[1]
    if n == 0:
        return np.empty((0, d))
    geometry = np.random.default_rng(np.random.SeedSequence(entropy=anomaly_seed, spawn_key=(7,)))

    if kind == "uniform-outlier":
        # Uniform in a box around the nominal support, rejecting anything
        # inside (or near) the 99.9% ball of every cluster.
        fence = nominal_fence_radius(d) * cluster_std
        lo = centers.min(axis=0) - (fence + 4.0 * cluster_std)
        hi = centers.max(axis=0) + (fence + 4.0 * cluster_std)
        out = np.empty((0, d))
        while out.shape[0] < n:
            batch = rng.uniform(lo, hi, size=(4 * n, d))
            dists = np.linalg.norm(batch[:, None, :] - centers[None, :, :], axis=2)
            keep = batch[(dists / cluster_std > 1.05 * fence / cluster_std).all(axis=1)]
            out = np.vstack([out, keep])
        return out[:n]

    if kind == "shifted-cluster":
        # Near-boundary contamination: a ghost cluster displaced by 2.5 sigma.
        base = centers[geometry.integers(0, centers.shape[0])]
        direction = geometry.normal(size=d)
        direction /= np.linalg.norm(direction)
        shifted = base + 2.5 * cluster_std * direction
        return shifted + rng.normal(0.0, cluster_std, size=(n, d))

    # local-deformation: strong perturbation of a fixed coordinate subset of
    # real rows, emulating a localized defect on an otherwise nominal sample.
    rows = nominal_pool[rng.integers(0, nominal_pool.shape[0], size=n)].astype(np.float64)
    n_coords = max(1, d // 4)
    coords = geometry.choice(d, size=n_coords, replace=False)
    signs = geometry.choice((-1.0, 1.0), size=n_coords)
    bumps = rng.uniform(12.0, 18.0, size=(n, n_coords)) * signs
    rows[:, coords] += bumps * cluster_std
    return rows


def generate(cfg: GeneratorConfig) -> tuple[FeatureDataset, FeatureDataset]:
    """Build a (train, test) pair: train carries exactly
    floor(contamination_rate * n_train) anomalies, test is a 50/50 mix."""
    root = np.random.SeedSequence(cfg.seed)
    ss_train, ss_test, ss_inject = root.spawn(3)
    rng_train = np.random.default_rng(ss_train)
    rng_test = np.random.default_rng(ss_test)

    sample, centers, std = _nominal_sampler(cfg, rng_train)
    provenance = {
        "generator": cfg.to_dict(),
        "centers": centers.tolist(),
        "cluster_std": std,
        "anomaly_seed": cfg.seed,
    }
    train = FeatureDataset(
        features=sample(cfg.n_train).astype(np.float32),
        eval_labels=np.zeros(cfg.n_train, dtype=np.uint8),
        provenance=provenance,
        contamination_rate=0.0,
    )
    if cfg.contamination_rate > 0.0:
        inject_seed = int(ss_inject.generate_state(1)[0])
        train = inject_anomalies(train, cfg.contamination_rate, cfg.anomaly_kind, inject_seed)

    # Test pool drawn from an independent stream; same nominal law.
    sample_test, _, _ = _nominal_sampler_like(cfg, centers, std, rng_test)
    n_nom = cfg.n_test // 2
    n_anom = cfg.n_test - n_nom
    nominal_rows = sample_test(n_nom)
    anomalous_rows = _sample_anomalies(
        n_anom, cfg.anomaly_kind, centers, std, rng_test, nominal_rows, anomaly_seed=cfg.seed
    )
    feats = np.vstack([nominal_rows, anomalous_rows])
    labels = np.concatenate(
        [np.zeros(n_nom, dtype=np.uint8), np.ones(n_anom, dtype=np.uint8)]
    )
    order = rng_test.permutation(cfg.n_test)
    test = FeatureDataset(
        features=feats[order].astype(np.float32),
        eval_labels=labels[order],
        provenance=provenance,
        contamination_rate=0.5,
    )
    return train, test


def _nominal_sampler_like(cfg, centers, std, rng):
    """Sampler reusing the train-set centers instead of drawing new ones."""
    if cfg.kind == "gaussian-blobs":

        def sample(n: int) -> np.ndarray:
            assignment = rng.integers(0, centers.shape[0], size=n)
            return centers[assignment] + rng.normal(0.0, std, size=(n, cfg.d))

        return sample, centers, std
    return _nominal_sampler(cfg, rng)


def inject_anomalies(
    nominal: FeatureDataset, rate: float, kind: str, seed: int
) -> FeatureDataset:
    """Replace floor(rate * N) randomly chosen rows with anomalies.

    Synthesis uses the generator ground truth from the dataset provenance
    when available; otherwise cluster centers and spread are estimated from
    the data itself. The input dataset is left untouched.
    """
    if not 0.0 <= rate <= 0.5:
        raise ValueError("rate must be in [0, 0.5]")
    if kind not in ANOMALY_KINDS:
        raise ValueError(f"anomaly kind must be one of {ANOMALY_KINDS}")
    n_replace = int(rate * nominal.n)
    if n_replace == 0:
        return FeatureDataset(
            features=nominal.features.copy(),
            eval_labels=nominal.eval_labels.copy(),
            provenance=dict(nominal.provenance),
            contamination_rate=0.0,
        )
    rng = np.random.default_rng(seed)
    if "centers" in nominal.provenance:
        centers = np.asarray(nominal.provenance["centers"], dtype=np.float64)
        std = float(nominal.provenance.get("cluster_std", 1.0))
    else:
        centers = nominal.features.mean(axis=0, dtype=np.float64)[None, :]
        std = float(nominal.features.std())
    anomaly_seed = int(nominal.provenance.get("anomaly_seed", seed))
    indices = rng.choice(nominal.n, size=n_replace, replace=False)
    pool = nominal.features.astype(np.float64)
    anomalies = _sample_anomalies(n_replace, kind, centers, std, rng, pool, anomaly_seed=anomaly_seed)
    features = pool.copy()
    features[indices] = anomalies
    labels = nominal.eval_labels.copy()
    labels[indices] = LABEL_ANOMALOUS
    return FeatureDataset(
        features=features.astype(np.float32),
        eval_labels=labels,
        provenance=dict(nominal.provenance),
        contamination_rate=n_replace / nominal.n,
    )


# ---------------------------------------------------------------------------
# Binary feature-file format
# ---------------------------------------------------------------------------
# Layout, in order and without padding:
#   4 bytes  magic "CMFT"
#   1 byte   version 0x01
#   4 bytes  u32 N (little-endian)
#   4 bytes  u32 d (little-endian)
#   N*d*4    float32 features, row-major, little-endian
#   N bytes  labels (0 nominal / 1 anomalous / 255 unknown)


def save_features(dataset: FeatureDataset, path) -> None:
    payload = _HEADER.pack(MAGIC, VERSION, dataset.n, dataset.dim)
    payload += dataset.features.astype("<f4", copy=False).tobytes(order="C")
    payload += dataset.eval_labels.tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(payload)
    except OSError as exc:
        raise FeatureFileError(f"cannot write {path}: {exc}") from exc


def load_features(path) -> FeatureDataset:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise FeatureFileError(f"cannot read {path}: {exc}") from exc
    if len(blob) >= 4 and blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < _HEADER.size:
        raise TruncatedFileError(f"header needs {_HEADER.size} bytes, file has {len(blob)}")
    magic, version, n, d = _HEADER.unpack_from(blob)
    if magic != MAGIC or version != VERSION:
        raise BadMagicError(f"bad magic/version {magic!r} v{version}")
    if n * d > MAX_ELEMENTS:
        raise DimOverflowError(f"declared payload {n}x{d} exceeds {MAX_ELEMENTS} elements")
    expected = _HEADER.size + n * d * 4 + n
    if len(blob) != expected:
        raise TruncatedFileError(f"expected {expected} bytes for N={n} d={d}, file has {len(blob)}")
    features = np.frombuffer(blob, dtype="<f4", count=n * d, offset=_HEADER.size)
    labels = np.frombuffer(blob, dtype=np.uint8, count=n, offset=_HEADER.size + n * d * 4)
    anomalous = float(np.mean(labels == LABEL_ANOMALOUS))
    return FeatureDataset(
        features=features.reshape(n, d),
        eval_labels=labels,
        provenance={"path": str(path)},
        contamination_rate=min(anomalous, 0.5),
    )
