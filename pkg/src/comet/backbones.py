"""Anomaly-detection backbones sharing one (per-sample loss, score) contract.

Two models are provided. A coupling flow maps features to a latent space and
is scored by negative log-likelihood; a feature-adapter plus discriminator
pair is trained against Gaussian-perturbed copies of its own features and
scored by the negated discriminator output, so that for both backbones a
higher score means more anomalous. Training losses are built from diffcore
tensors, so the weighting and meta-learning layers never branch on the model
in use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .diffcore import ParamSet, Tensor

__all__ = [
    "FeatureExtractorStub",
    "IDENTITY_STUB",
    "Transform",
    "IDENTITY_TRANSFORM",
    "default_transforms",
    "augmented_transforms",
    "CouplingFlow",
    "SimpleNetModel",
    "FlowBackbone",
    "SimpleNetBackbone",
    "flow_forward",
    "flow_inverse",
    "nf_loss",
    "nf_score",
    "sn_forward",
    "sn_perturb",
    "sn_loss",
]

LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Frozen feature extractor stand-in and input transforms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureExtractorStub:
    """Frozen feature map applied identically at train and test time.

    mode "identity" passes features through; "random_projection" applies a
    fixed seed-derived Gaussian projection to `out_dim` dimensions.
    """

    mode: str = "identity"
    seed: int = 0
    out_dim: int | None = None

    def __post_init__(self):
        if self.mode not in ("identity", "random_projection"):
            raise ValueError(f"unknown extractor mode '{self.mode}'")
        if self.mode == "random_projection" and not self.out_dim:
            raise ValueError("random_projection requires out_dim")

    def output_dim(self, input_dim: int) -> int:
        return input_dim if self.mode == "identity" else int(self.out_dim)

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.mode == "identity":
            return x
        d_in = x.shape[-1]
        rng = np.random.default_rng(self.seed)
        projection = rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_in, self.out_dim))
        return x @ projection


IDENTITY_STUB = FeatureExtractorStub()


@dataclass(frozen=True)
class Transform:
    """Invertible input transformation: identity, sign flip, or permutation."""

    kind: str = "identity"
    signs: tuple[int, ...] | None = None
    perm: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("identity", "sign_flip", "permutation"):
            raise ValueError(f"unknown transform kind '{self.kind}'")
        if self.kind == "sign_flip" and self.signs is None:
            raise ValueError("sign_flip requires signs")
        if self.kind == "permutation":
            if self.perm is None or sorted(self.perm) != list(range(len(self.perm))):
                raise ValueError("permutation requires a valid index permutation")

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "identity":
            return x
        if self.kind == "sign_flip":
            return x * np.asarray(self.signs, dtype=np.float64)
        return x[..., list(self.perm)]


IDENTITY_TRANSFORM = Transform()


def default_transforms() -> tuple[Transform, ...]:
    return (IDENTITY_TRANSFORM,)


def augmented_transforms(dim: int, seed: int = 0) -> tuple[Transform, ...]:
    """Identity plus two sign-flip patterns and one coordinate permutation."""
    rng = np.random.default_rng(seed)
    flips1 = tuple(int(s) for s in rng.choice((-1, 1), size=dim))
    flips2 = tuple(-s for s in flips1)
    perm = tuple(int(i) for i in rng.permutation(dim))
    return (
        IDENTITY_TRANSFORM,
        Transform("sign_flip", signs=flips1),
        Transform("sign_flip", signs=flips2),
        Transform("permutation", perm=perm),
    )


# ---------------------------------------------------------------------------
# Coupling-flow backbone
# ---------------------------------------------------------------------------


def _wrap_params(params) -> Mapping[str, Tensor]:
    if isinstance(params, ParamSet):
        return {k: Tensor(v) for k, v in params.entries.items()}
    return params


def _mlp_t(pt: Mapping[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    hidden = (x @ pt[f"{prefix}.w0"] + pt[f"{prefix}.b0"]).tanh()
    return hidden @ pt[f"{prefix}.w1"] + pt[f"{prefix}.b1"]


def _mlp_np(params: ParamSet, prefix: str, x: np.ndarray) -> np.ndarray:
    hidden = np.tanh(x @ params[f"{prefix}.w0"] + params[f"{prefix}.b0"])
    return hidden @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"]


class CouplingFlow:
    """Stack of affine coupling layers over an even-dimensional input.

    Each layer rescales and shifts one half of the coordinates conditioned on
    the other half, alternating halves between layers. The raw scale output
    is squashed by scale_clamp * tanh(raw / scale_clamp) before
    exponentiation, which bounds every log-scale term and keeps the log-det
    finite. Zero-initialized output layers make the initial flow an exact
    identity with log-det 0.
    """

    def __init__(
        self,
        input_dim: int,
        num_layers: int = 2,
        hidden_dim: int = 16,
        scale_clamp: float = 2.0,
    ):
        if input_dim <= 0 or input_dim % 2 != 0:
            raise ValueError(f"input_dim must be positive and even, got {input_dim}")
        if num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if scale_clamp <= 0:
            raise ValueError("scale_clamp must be positive")
        self.input_dim = input_dim
        self.num_layers = num_layers
        self.hidden_dim = hidden_dim
        self.scale_clamp = float(scale_clamp)

    @property
    def half(self) -> int:
        return self.input_dim // 2

    def init_params(self, seed: int) -> ParamSet:
        rng = np.random.default_rng(seed)
        entries: dict[str, np.ndarray] = {}
        for layer in range(self.num_layers):
            for net in ("scale", "shift"):
                prefix = f"layer{layer}.{net}"
                entries[f"{prefix}.w0"] = rng.normal(
                    0.0, 1.0 / math.sqrt(self.half), size=(self.half, self.hidden_dim)
                )
                entries[f"{prefix}.b0"] = np.zeros(self.hidden_dim)
                entries[f"{prefix}.w1"] = np.zeros((self.hidden_dim, self.half))
                entries[f"{prefix}.b1"] = np.zeros(self.half)
        return ParamSet(entries)

    def constant_scale_params(self, log_scale: float) -> ParamSet:
        """Params making every layer scale its half by exp(log_scale).

        Used as a closed-form Jacobian fixture; requires |log_scale| to be
        representable under the tanh clamp.
        """
        ratio = log_scale / self.scale_clamp
        if abs(ratio) >= 1.0:
            raise ValueError("log_scale exceeds the clamp range")
        raw = self.scale_clamp * math.atanh(ratio)
        base = self.init_params(seed=0)
        entries = dict(base.entries)
        for layer in range(self.num_layers):
            entries[f"layer{layer}.scale.b1"] = np.full(self.half, raw)
        return ParamSet(entries)

    # -- forward/inverse ----------------------------------------------------

    def _forward_t(self, pt: Mapping[str, Tensor], u: np.ndarray):
        h1 = Tensor(u[:, : self.half])
        h2 = Tensor(u[:, self.half :])
        logdet = Tensor(np.zeros(u.shape[0]))
        clamp = self.scale_clamp
        for layer in range(self.num_layers):
            cond, moved = (h1, h2) if layer % 2 == 0 else (h2, h1)
            raw = _mlp_t(pt, f"layer{layer}.scale", cond)
            s = (raw * (1.0 / clamp)).tanh() * clamp
            t = _mlp_t(pt, f"layer{layer}.shift", cond)
            moved = moved * s.exp() + t
            logdet = logdet + s.sum(axis=1)
            if layer % 2 == 0:
                h2 = moved
            else:
                h1 = moved
        return h1, h2, logdet

    def forward(self, params: ParamSet, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        u2d, single = _as_batch(u, self.input_dim)
        h1, h2, logdet = self._forward_t(_wrap_params(params), u2d)
        z = np.concatenate([h1.data, h2.data], axis=1)
        return (z[0], float(logdet.data[0])) if single else (z, logdet.data)

    def inverse(self, params: ParamSet, z: np.ndarray) -> np.ndarray:
        z2d, single = _as_batch(z, self.input_dim)
        if not np.all(np.isfinite(z2d)):
            raise ValueError("latent input must be finite")
        h1 = z2d[:, : self.half].copy()
        h2 = z2d[:, self.half :].copy()
        clamp = self.scale_clamp
        for layer in reversed(range(self.num_layers)):
            cond, moved = (h1, h2) if layer % 2 == 0 else (h2, h1)
            s = clamp * np.tanh(_mlp_np(params, f"layer{layer}.scale", cond) / clamp)
            t = _mlp_np(params, f"layer{layer}.shift", cond)
            moved = (moved - t) * np.exp(-s)
            if layer % 2 == 0:
                h2 = moved
            else:
                h1 = moved
        u = np.concatenate([h1, h2], axis=1)
        return u[0] if single else u

    def per_sample_loss(self, pt: Mapping[str, Tensor], u: np.ndarray, noise=None) -> Tensor:
        """||z||^2 / 2 - logdet per sample, differentiable w.r.t. params."""
        h1, h2, logdet = self._forward_t(pt, u)
        sq = (h1 * h1).sum(axis=1) + (h2 * h2).sum(axis=1)
        return sq * 0.5 - logdet


def _as_batch(x: np.ndarray, dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
        single = True
    else:
        single = False
    if x.shape[1] != dim:
        raise ValueError(f"expected feature dimension {dim}, got {x.shape[1]}")
    return x, single


def flow_forward(flow: CouplingFlow, params: ParamSet, u: np.ndarray):
    """Latent mapping z and log|det dz/du| for one vector or a batch."""
    return flow.forward(params, u)


def flow_inverse(flow: CouplingFlow, params: ParamSet, z: np.ndarray) -> np.ndarray:
    """Exact algebraic inverse of flow_forward."""
    return flow.inverse(params, z)


def nf_loss(flow: CouplingFlow, params: ParamSet, u: np.ndarray):
    """Training loss ||z||^2 / 2 - logdet (scalar for a vector, array for a batch)."""
    u2d, single = _as_batch(u, flow.input_dim)
    losses = flow.per_sample_loss(_wrap_params(params), u2d).data
    return float(losses[0]) if single else losses


def nf_score(
    flow: CouplingFlow,
    params: ParamSet,
    extractor: FeatureExtractorStub,
    transforms: Sequence[Transform],
    x: np.ndarray,
):
    """Negative log-likelihood under a standard-normal latent, averaged over
    the transform set: mean_S [ d/2 * log(2*pi) + ||z||^2 / 2 - logdet ]."""
    if not transforms:
        raise ValueError("transform set must be non-empty")
    x2d, single = _as_batch(x, np.asarray(x).shape[-1])
    terms = np.zeros(x2d.shape[0])
    for transform in transforms:
        u = extractor.apply(transform.apply(x2d))
        z, logdet = flow.forward(params, u)
        terms += 0.5 * flow.input_dim * LOG_2PI + 0.5 * np.sum(z * z, axis=1) - logdet
    scores = terms / len(transforms)
    return float(scores[0]) if single else scores


# ---------------------------------------------------------------------------
# Adapter + discriminator backbone
# ---------------------------------------------------------------------------


class SimpleNetModel:
    """Single affine feature adapter feeding a 2-layer MLP discriminator.

    The discriminator is trained to output at least +truncation on real
    features and at most -truncation on Gaussian-perturbed copies; tanh
    hidden units keep the model smooth away from the hinge points.
    """

    def __init__(
        self,
        input_dim: int,
        adapter_dim: int | None = None,
        hidden_dim: int = 16,
        noise_std: float = 0.1,
        truncation: float = 0.5,
    ):
        adapter_dim = input_dim if adapter_dim is None else adapter_dim
        if adapter_dim > input_dim:
            raise ValueError("adapter output dim must not exceed input dim")
        if adapter_dim < 1:
            raise ValueError("adapter_dim must be >= 1")
        if noise_std <= 0:
            raise ValueError("noise_std must be positive")
        if truncation <= 0:
            raise ValueError("truncation must be positive")
        self.input_dim = input_dim
        self.adapter_dim = adapter_dim
        self.hidden_dim = hidden_dim
        self.noise_std = float(noise_std)
        self.truncation = float(truncation)

    def init_params(self, seed: int) -> ParamSet:
        rng = np.random.default_rng(seed)
        if self.adapter_dim == self.input_dim:
            g_w = np.eye(self.input_dim)
        else:
            g_w = rng.normal(
                0.0, 1.0 / math.sqrt(self.input_dim), size=(self.input_dim, self.adapter_dim)
            )
        return ParamSet(
            {
                "adapter.w": g_w,
                "adapter.b": np.zeros(self.adapter_dim),
                "disc.w0": rng.normal(
                    0.0, 1.0 / math.sqrt(self.adapter_dim), size=(self.adapter_dim, self.hidden_dim)
                ),
                "disc.b0": np.zeros(self.hidden_dim),
                "disc.w1": rng.normal(0.0, 1.0 / math.sqrt(self.hidden_dim), size=(self.hidden_dim, 1)),
                "disc.b1": np.zeros(1),
            }
        )

    def adapt_t(self, pt: Mapping[str, Tensor], feats: np.ndarray) -> Tensor:
        return Tensor(feats) @ pt["adapter.w"] + pt["adapter.b"]

    def discriminate_t(self, pt: Mapping[str, Tensor], q: Tensor) -> Tensor:
        hidden = (q @ pt["disc.w0"] + pt["disc.b0"]).tanh()
        return hidden @ pt["disc.w1"] + pt["disc.b1"]

    def discriminate_np(self, params: ParamSet, q: np.ndarray) -> np.ndarray:
        hidden = np.tanh(q @ params["disc.w0"] + params["disc.b0"])
        return (hidden @ params["disc.w1"] + params["disc.b1"])[:, 0]

    def adapt_np(self, params: ParamSet, feats: np.ndarray) -> np.ndarray:
        return feats @ params["adapter.w"] + params["adapter.b"]

    def per_sample_loss(self, pt: Mapping[str, Tensor], feats: np.ndarray, noise: np.ndarray) -> Tensor:
        """Truncated-L1 pair: relu(th - D(q)) + relu(th + D(q + eps))."""
        if noise is None:
            raise ValueError("this backbone requires a perturbation noise array")
        th = self.truncation
        q = self.adapt_t(pt, feats)
        q_perturbed = q + Tensor(noise)
        d_real = self.discriminate_t(pt, q)
        d_fake = self.discriminate_t(pt, q_perturbed)
        per_sample = (th - d_real).relu() + (th + d_fake).relu()
        return per_sample.reshape((feats.shape[0],))


def sn_forward(
    model: SimpleNetModel,
    params: ParamSet,
    extractor: FeatureExtractorStub,
    x: np.ndarray,
):
    """Raw discriminator output D(G(F(x))); high on nominal inputs."""
    x2d, single = _as_batch(x, np.asarray(x).shape[-1])
    q = model.adapt_np(params, extractor.apply(x2d))
    d = model.discriminate_np(params, q)
    return float(d[0]) if single else d


def sn_perturb(q: np.ndarray, noise_std: float, rng: np.random.Generator) -> np.ndarray:
    """q + eps with eps ~ N(0, noise_std^2) i.i.d. per coordinate."""
    if noise_std < 0:
        raise ValueError("noise_std must be nonnegative")
    q = np.asarray(q, dtype=np.float64)
    return q + rng.normal(0.0, noise_std, size=q.shape) if noise_std > 0 else q.copy()


def sn_loss(model: SimpleNetModel, params: ParamSet, q: np.ndarray, q_perturbed: np.ndarray):
    """Hinge pair max(0, th - D(q)) + max(0, th + D(q-)) on adapted features."""
    q2d, single = _as_batch(q, model.adapter_dim)
    qp2d, _ = _as_batch(q_perturbed, model.adapter_dim)
    th = model.truncation
    losses = np.maximum(0.0, th - model.discriminate_np(params, q2d)) + np.maximum(
        0.0, th + model.discriminate_np(params, qp2d)
    )
    return float(losses[0]) if single else losses


# ---------------------------------------------------------------------------
# Uniform contract used by the training driver
# ---------------------------------------------------------------------------


class FlowBackbone:
    """Coupling flow bound to its frozen extractor and transform set."""

    name = "nf"

    def __init__(
        self,
        flow: CouplingFlow,
        extractor: FeatureExtractorStub = IDENTITY_STUB,
        transforms: Sequence[Transform] = (IDENTITY_TRANSFORM,),
    ):
        if not transforms:
            raise ValueError("transform set must be non-empty")
        self.flow = flow
        self.extractor = extractor
        self.transforms = tuple(transforms)

    def init_params(self, seed: int) -> ParamSet:
        return self.flow.init_params(seed)

    def prepare(self, x: np.ndarray) -> np.ndarray:
        return self.extractor.apply(np.asarray(x, dtype=np.float64))

    def draw_noise(self, rng: np.random.Generator, n: int):
        return None

    def per_sample_loss(self, pt: Mapping[str, Tensor], feats: np.ndarray, noise=None) -> Tensor:
        return self.flow.per_sample_loss(pt, feats, noise)

    def scores(self, params: ParamSet, x: np.ndarray) -> np.ndarray:
        return nf_score(self.flow, params, self.extractor, self.transforms, x)


class SimpleNetBackbone:
    """Adapter/discriminator model bound to its frozen extractor.

    Published scores are the negated discriminator output so that, as for the
    flow backbone, higher means more anomalous.
    """

    name = "sn"

    def __init__(self, model: SimpleNetModel, extractor: FeatureExtractorStub = IDENTITY_STUB):
        self.model = model
        self.extractor = extractor

    def init_params(self, seed: int) -> ParamSet:
        return self.model.init_params(seed)

    def prepare(self, x: np.ndarray) -> np.ndarray:
        return self.extractor.apply(np.asarray(x, dtype=np.float64))

    def draw_noise(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.normal(0.0, self.model.noise_std, size=(n, self.model.adapter_dim))

    def per_sample_loss(self, pt: Mapping[str, Tensor], feats: np.ndarray, noise=None) -> Tensor:
        return self.model.per_sample_loss(pt, feats, noise)

    def scores(self, params: ParamSet, x: np.ndarray) -> np.ndarray:
        x2d, single = _as_batch(x, np.asarray(x).shape[-1])
        d = sn_forward(self.model, params, self.extractor, x2d)
        scores = -d
        return float(scores[0]) if single else scores
