"""Reverse-mode automatic differentiation over dense float64 arrays.

The trainer only ever touches small computation graphs (a few dozen array
nodes per step), so the tape is deliberately simple: each Tensor remembers
its parents and a closure that maps the upstream gradient to per-parent
gradients.  ``backward`` walks the graph once in reverse topological order.
Everything is float64; there is no device or dtype negotiation.

Vectors and matrices are plain numpy arrays (1-D / 2-D).  A "parameter" is a
Tensor built with ``requires_grad=True``.  Constants wrap arrays lazily and
cost nothing when gradients are disabled via ``no_grad()``.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DataError, DegenerateInputError, ParameterError, UsageError

Array = np.ndarray

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (pure numpy forward)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_f64(x) -> Array:
    a = np.asarray(x, dtype=np.float64)
    return a


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    # collapse extra leading axes
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    # collapse axes that were broadcast from size one
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple["Tensor", ...] = (), _backward=None):
        self.data = _as_f64(data)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.name = name
        self._parents = _parents
        self._backward = _backward

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.shape}, grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- graph plumbing ------------------------------------------------
    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    @staticmethod
    def _node(data: Array, parents: tuple["Tensor", ...], backward) -> "Tensor":
        if _grad_enabled and any(p.requires_grad for p in parents):
            out = Tensor(data, _parents=parents, _backward=backward)
            out.requires_grad = True
            return out
        return Tensor(data)

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        other = self._lift(other)
        out_data = self.data + other.data

        def bwd(g):
            return (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape))

        return self._node(out_data, (self, other), bwd)

    __radd__ = __add__

    def __neg__(self):
        def bwd(g):
            return (-g,)

        return self._node(-self.data, (self,), bwd)

    def __sub__(self, other):
        other = self._lift(other)
        out_data = self.data - other.data

        def bwd(g):
            return (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape))

        return self._node(out_data, (self, other), bwd)

    def __rsub__(self, other):
        return self._lift(other).__sub__(self)

    def __mul__(self, other):
        other = self._lift(other)
        out_data = self.data * other.data

        def bwd(g):
            return (_unbroadcast(g * other.data, self.shape),
                    _unbroadcast(g * self.data, other.shape))

        return self._node(out_data, (self, other), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        out_data = self.data / other.data

        def bwd(g):
            return (_unbroadcast(g / other.data, self.shape),
                    _unbroadcast(-g * self.data / (other.data ** 2), other.shape))

        return self._node(out_data, (self, other), bwd)

    def __rtruediv__(self, other):
        return self._lift(other).__truediv__(self)

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise UsageError("tensor exponents are not supported")
        e = float(exponent)
        out_data = self.data ** e

        def bwd(g):
            return (g * e * self.data ** (e - 1.0),)

        return self._node(out_data, (self,), bwd)

    def __matmul__(self, other):
        other = self._lift(other)
        if self.ndim != 2 or other.ndim != 2:
            raise UsageError("matmul expects 2-D operands")
        if self.shape[1] != other.shape[0]:
            raise UsageError(
                f"matmul shape mismatch: {self.shape} @ {other.shape}")
        out_data = self.data @ other.data

        def bwd(g):
            return (g @ other.data.T, self.data.T @ g)

        return self._node(out_data, (self, other), bwd)

    @property
    def T(self) -> "Tensor":
        def bwd(g):
            return (g.T,)

        return self._node(self.data.T, (self,), bwd)

    # -- elementwise nonlinearities -------------------------------------
    def exp(self):
        out_data = np.exp(self.data)

        def bwd(g):
            return (g * out_data,)

        return self._node(out_data, (self,), bwd)

    def log(self):
        def bwd(g):
            return (g / self.data,)

        return self._node(np.log(self.data), (self,), bwd)

    def tanh(self):
        out_data = np.tanh(self.data)

        def bwd(g):
            return (g * (1.0 - out_data ** 2),)

        return self._node(out_data, (self,), bwd)

    def sigmoid(self):
        out_data = _sigmoid_np(self.data)

        def bwd(g):
            return (g * out_data * (1.0 - out_data),)

        return self._node(out_data, (self,), bwd)

    def leaky_relu(self, slope: float = 0.01):
        _check_slope(slope)
        # subgradient convention: derivative 1 at exactly zero
        factor = np.where(self.data >= 0.0, 1.0, slope)
        out_data = self.data * factor

        def bwd(g):
            return (g * factor,)

        return self._node(out_data, (self,), bwd)

    def clip(self, lo: float, hi: float):
        out_data = np.clip(self.data, lo, hi)
        mask = (self.data > lo) & (self.data < hi)

        def bwd(g):
            return (g * mask,)

        return self._node(out_data, (self,), bwd)

    # -- reductions ------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, self.shape).copy(),)

        return self._node(out_data, (self,), bwd)

    def mean(self, axis=None, keepdims: bool = False):
        out_data = self.data.mean(axis=axis, keepdims=keepdims)
        if axis is None:
            count = self.data.size
        else:
            count = self.data.shape[axis]

        def bwd(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / count, self.shape).copy(),)

        return self._node(out_data, (self,), bwd)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        old = self.shape
        out_data = self.data.reshape(shape)

        def bwd(g):
            return (g.reshape(old),)

        return self._node(out_data, (self,), bwd)

    def gather_rows(self, indices) -> "Tensor":
        """out[n] = self[n, indices[n]] for a 2-D tensor."""
        if self.ndim != 2:
            raise UsageError("gather_rows expects a 2-D tensor")
        idx = np.asarray(indices, dtype=np.int64)
        if idx.ndim != 1 or idx.shape[0] != self.shape[0]:
            raise UsageError("gather_rows index shape mismatch")
        if idx.min(initial=0) < 0 or idx.max(initial=-1) >= self.shape[1]:
            raise DataError("gather_rows index out of range")
        rows = np.arange(self.shape[0])
        out_data = self.data[rows, idx]

        def bwd(g):
            full = np.zeros_like(self.data)
            np.add.at(full, (rows, idx), g)
            return (full,)

        return self._node(out_data, (self,), bwd)

    # -- backward --------------------------------------------------------
    def backward(self) -> None:
        """Accumulate gradients of this scalar into ``.grad`` of the graph."""
        if self.data.size != 1:
            raise UsageError("backward requires a scalar loss")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            for parent, pgrad in zip(node._parents, node._backward(node.grad)):
                if not parent.requires_grad or pgrad is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(pgrad, dtype=np.float64, copy=True)
                else:
                    parent.grad = parent.grad + pgrad


def gradients(loss: Tensor, params: Sequence[Tensor]) -> list[Array]:
    """Gradients of a scalar loss for each parameter.

    Parameters that the loss does not reach get an all-zero gradient.  The
    graph's transient ``.grad`` slots are cleared before and after, so
    repeated calls never accumulate across steps.
    """
    for p in params:
        p.grad = None
    loss.backward()
    out = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
           for p in params]
    for p in params:
        p.grad = None
    return out


# ---------------------------------------------------------------------------
# public scalar/array math kernels
# ---------------------------------------------------------------------------

def _sigmoid_np(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _check_slope(slope: float) -> None:
    if not (0.0 < slope < 1.0):
        raise ParameterError(f"leaky_relu slope must lie in (0, 1), got {slope}")


def _check_finite(name: str, a: Array) -> None:
    if not np.all(np.isfinite(a)):
        raise DataError(f"{name} contains non-finite values")


def cosine_sim(a, b) -> float:
    """Cosine similarity of two 1-D vectors."""
    av = _as_f64(a).ravel()
    bv = _as_f64(b).ravel()
    if av.shape != bv.shape:
        raise UsageError(f"cosine_sim shape mismatch: {av.shape} vs {bv.shape}")
    _check_finite("cosine_sim input", av)
    _check_finite("cosine_sim input", bv)
    na = math.sqrt(float(av @ av))
    nb = math.sqrt(float(bv @ bv))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine_sim is undefined for zero-norm input")
    return float(av @ bv) / (na * nb)


def softmax(scores, temperature: float = 1.0, axis: int = -1):
    """Temperature softmax with max-subtraction; sums to one along ``axis``.

    Accepts a Tensor (differentiable) or any array-like (returns ndarray).
    """
    if not (temperature > 0.0) or not math.isfinite(temperature):
        raise ParameterError(f"softmax temperature must be positive, got {temperature}")
    if isinstance(scores, Tensor):
        shifted = (scores - np.max(scores.data, axis=axis, keepdims=True)) * (1.0 / temperature)
        e = shifted.exp()
        return e / e.sum(axis=axis, keepdims=True)
    arr = _as_f64(scores)
    _check_finite("softmax input", arr)
    shifted = (arr - arr.max(axis=axis, keepdims=True)) / temperature
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def leaky_relu(x, slope: float = 0.01):
    """LeakyReLU: x for x >= 0, slope*x otherwise."""
    _check_slope(slope)
    if isinstance(x, Tensor):
        return x.leaky_relu(slope)
    arr = _as_f64(x)
    out = np.where(arr >= 0.0, arr, slope * arr)
    return float(out) if np.isscalar(x) or arr.ndim == 0 else out


def sigmoid(x):
    if isinstance(x, Tensor):
        return x.sigmoid()
    arr = _as_f64(x)
    out = _sigmoid_np(np.atleast_1d(arr))
    return float(out[0]) if arr.ndim == 0 else out.reshape(arr.shape)


def row_norms(x: Tensor) -> Tensor:
    """L2 norm of each row of a 2-D tensor, shape (n, 1)."""
    return ((x * x).sum(axis=1, keepdims=True)) ** 0.5


def normalize_rows(x: Tensor, min_norm: float = 1e-12) -> Tensor:
    norms = np.sqrt((x.data ** 2).sum(axis=1))
    if np.any(norms < min_norm):
        raise DegenerateInputError("cannot normalize zero-norm rows")
    return x / row_norms(x)


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarities between rows of ``a`` and rows of ``b``."""
    return normalize_rows(a) @ normalize_rows(b).T


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    parameter: str
    analytic: float
    numeric: float
    rel_error: float


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
               h: float = 1e-5) -> list[GradCheckReport]:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` must rebuild the scalar loss from the current parameter
    values each call.  One report per scalar parameter entry;
    rel_error = |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    if not (h > 0.0):
        raise ParameterError(f"finite-difference step must be positive, got {h}")
    loss = loss_fn()
    if loss.data.size != 1:
        raise UsageError("grad_check expects a scalar loss")
    analytic = gradients(loss, params)
    reports: list[GradCheckReport] = []
    for p, grad in zip(params, analytic):
        label = p.name or "param"
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                f_plus = float(loss_fn().data)
            flat[i] = orig - h
            with no_grad():
                f_minus = float(loss_fn().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(gflat[i])
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            idx = np.unravel_index(i, p.data.shape) if p.data.ndim else ()
            suffix = "[" + ",".join(str(k) for k in idx) + "]" if idx else ""
            reports.append(GradCheckReport(f"{label}{suffix}", a, numeric, rel))
    return reports


def max_rel_error(reports: Iterable[GradCheckReport]) -> float:
    return max((r.rel_error for r in reports), default=0.0)
