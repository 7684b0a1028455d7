"""Minimal reverse-mode differentiation over float64 numpy arrays.

Covers exactly what the anomaly backbones and training losses need: affine
maps, tanh/relu/exp/log, elementwise arithmetic with numpy broadcasting,
reductions and squares. Gradients of a scalar loss w.r.t. a ParamSet are
exact and bitwise deterministic for fixed inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

__all__ = [
    "NonFiniteError",
    "Tensor",
    "ParamSet",
    "Gradient",
    "GradCheckReport",
    "evaluate",
    "gradient",
    "value_and_gradient",
    "grad_check",
]


class NonFiniteError(ArithmeticError):
    """A forward op produced NaN or Inf; carries the name of that op."""

    def __init__(self, op: str):
        super().__init__(f"non-finite value produced by op '{op}'")
        self.op = op


def _checked(data: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(op)
    return data


def _quiet():
    # Forward ops compute eagerly and validate afterwards; numpy warnings
    # about the intermediate nan/inf would be noise on a path that raises.
    return np.errstate(invalid="ignore", divide="ignore", over="ignore")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Node in the computation graph wrapping a float64 ndarray."""

    __slots__ = ("data", "grad", "_parents", "_bwd")

    def __init__(self, data, _parents=(), _bwd=None, _op="leaf"):
        with _quiet():
            data = np.asarray(data, dtype=np.float64)
        self.data = _checked(data, _op)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._bwd: Callable[[], None] | None = _bwd

    # -- graph plumbing ----------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        g = _unbroadcast(g, self.data.shape)
        self.grad = g if self.grad is None else self.grad + g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._bwd is not None:
                node._bwd()

    # -- arithmetic --------------------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def __add__(self, other):
        other = Tensor._lift(other)
        out = Tensor(self.data + other.data, (self, other), _op="add")

        def bwd():
            self._accumulate(out.grad)
            other._accumulate(out.grad)

        out._bwd = bwd
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, (self,), _op="neg")
        out._bwd = lambda: self._accumulate(-out.grad)
        return out

    def __sub__(self, other):
        return self + (-Tensor._lift(other))

    def __rsub__(self, other):
        return Tensor._lift(other) + (-self)

    def __mul__(self, other):
        other = Tensor._lift(other)
        out = Tensor(self.data * other.data, (self, other), _op="mul")

        def bwd():
            self._accumulate(other.data * out.grad)
            other._accumulate(self.data * out.grad)

        out._bwd = bwd
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._lift(other)
        with _quiet():
            value = self.data / other.data
        out = Tensor(value, (self, other), _op="div")

        def bwd():
            self._accumulate(out.grad / other.data)
            other._accumulate(-self.data / (other.data * other.data) * out.grad)

        out._bwd = bwd
        return out

    def __rtruediv__(self, other):
        return Tensor._lift(other) / self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only numeric exponents are supported")
        out = Tensor(self.data ** exponent, (self,), _op="pow")

        def bwd():
            self._accumulate(exponent * self.data ** (exponent - 1) * out.grad)

        out._bwd = bwd
        return out

    def __matmul__(self, other):
        other = Tensor._lift(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ValueError("matmul expects 2-D operands")
        out = Tensor(self.data @ other.data, (self, other), _op="matmul")

        def bwd():
            self._accumulate(out.grad @ other.data.T)
            other._accumulate(self.data.T @ out.grad)

        out._bwd = bwd
        return out

    # -- nonlinearities and reductions ---------------------------------------

    def tanh(self):
        out = Tensor(np.tanh(self.data), (self,), _op="tanh")
        out._bwd = lambda: self._accumulate((1.0 - out.data * out.data) * out.grad)
        return out

    def relu(self):
        out = Tensor(np.maximum(self.data, 0.0), (self,), _op="relu")
        out._bwd = lambda: self._accumulate((self.data > 0.0) * out.grad)
        return out

    def exp(self):
        with _quiet():
            value = np.exp(self.data)
        out = Tensor(value, (self,), _op="exp")
        out._bwd = lambda: self._accumulate(out.data * out.grad)
        return out

    def log(self):
        with _quiet():
            value = np.log(self.data)
        out = Tensor(value, (self,), _op="log")
        out._bwd = lambda: self._accumulate(out.grad / self.data)
        return out

    def square(self):
        return self * self

    def sum(self, axis=None):
        out = Tensor(self.data.sum(axis=axis), (self,), _op="sum")

        def bwd():
            g = out.grad
            if axis is not None:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.data.shape).copy())

        out._bwd = bwd
        return out

    def reshape(self, shape):
        out = Tensor(self.data.reshape(shape), (self,), _op="reshape")
        out._bwd = lambda: self._accumulate(out.grad.reshape(self.data.shape))
        return out

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


# ---------------------------------------------------------------------------
# Parameter collections
# ---------------------------------------------------------------------------


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ParamSet:
    """Named, immutable float64 parameter arrays."""

    entries: dict[str, np.ndarray]

    def __post_init__(self):
        frozen = {}
        for name, value in self.entries.items():
            arr = _freeze(value)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"parameter '{name}' contains non-finite values")
            frozen[name] = arr
        object.__setattr__(self, "entries", frozen)

    @property
    def total_dim(self) -> int:
        return sum(v.size for v in self.entries.values())

    def sq_norm(self) -> float:
        return float(sum(np.sum(v * v) for v in self.entries.values()))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def names(self):
        return self.entries.keys()


@dataclass(frozen=True)
class Gradient:
    """Gradient arrays shape-matched to a ParamSet."""

    entries: dict[str, np.ndarray]

    def __post_init__(self):
        frozen = {}
        for name, value in self.entries.items():
            arr = _freeze(value)
            if not np.all(np.isfinite(arr)):
                raise NonFiniteError("gradient")
            frozen[name] = arr
        object.__setattr__(self, "entries", frozen)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def matches(self, params: ParamSet) -> bool:
        return set(self.entries) == set(params.entries) and all(
            self.entries[k].shape == params.entries[k].shape for k in self.entries
        )


LossFn = Callable[[Mapping[str, Tensor], object], Tensor]


def _run(loss_fn: LossFn, params: ParamSet, inputs) -> tuple[Tensor, dict[str, Tensor]]:
    leaves = {name: Tensor(arr) for name, arr in params.entries.items()}
    out = loss_fn(leaves, inputs)
    if not isinstance(out, Tensor):
        out = Tensor(out)
    if out.data.size != 1:
        raise ValueError("loss function must return a scalar")
    return out, leaves


def evaluate(loss_fn: LossFn, params: ParamSet, inputs=None) -> float:
    """Scalar loss at `params`; deterministic given (params, inputs)."""
    out, _ = _run(loss_fn, params, inputs)
    return float(out.data)


def value_and_gradient(loss_fn: LossFn, params: ParamSet, inputs=None) -> tuple[float, Gradient]:
    out, leaves = _run(loss_fn, params, inputs)
    out.backward()
    grads = {
        name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data))
        for name, leaf in leaves.items()
    }
    return float(out.data), Gradient(grads)


def gradient(loss_fn: LossFn, params: ParamSet, inputs=None) -> Gradient:
    """Exact reverse-mode gradient of the scalar loss at `params`."""
    return value_and_gradient(loss_fn, params, inputs)[1]


@dataclass(frozen=True)
class GradCheckReport:
    """Per-parameter comparison of analytic vs central-difference gradients.

    Errors are relative above unit scale and absolute below it:
    err = |analytic - numeric| / max(1, |analytic|, |numeric|).
    """

    max_err: dict[str, float]
    failures: tuple[str, ...]
    tol: float

    @property
    def ok(self) -> bool:
        return not self.failures


def grad_check(
    loss_fn: LossFn,
    params: ParamSet,
    inputs=None,
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare gradient() against central finite differences.

    Report-only: entries exceeding `tol` are flagged, never raised. Useful to
    spot both bugs and genuinely non-smooth evaluation points.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    analytic = gradient(loss_fn, params, inputs)
    max_err: dict[str, float] = {}
    failures: list[str] = []
    for name, base in params.entries.items():
        worst = 0.0
        flat = base.ravel()
        for idx in range(flat.size):
            bumped = flat.copy()
            bumped[idx] += h
            plus = evaluate(loss_fn, _replace(params, name, bumped.reshape(base.shape)), inputs)
            bumped[idx] = flat[idx] - h
            minus = evaluate(loss_fn, _replace(params, name, bumped.reshape(base.shape)), inputs)
            numeric = (plus - minus) / (2.0 * h)
            a = analytic[name].ravel()[idx]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
        max_err[name] = worst
        if worst > tol:
            failures.append(name)
    return GradCheckReport(max_err=max_err, failures=tuple(failures), tol=tol)


def _replace(params: ParamSet, name: str, value: np.ndarray) -> ParamSet:
    entries = dict(params.entries)
    entries[name] = value
    return ParamSet(entries)
