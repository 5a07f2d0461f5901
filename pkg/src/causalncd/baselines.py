"""Reference pseudo-labelers the ablation compares against.

Two label sources that need no graph: an entropic optimal-transport plan
between novel points and novel prototypes under uniform marginals (every
prototype receives the same total mass, so cluster sizes are balanced by
construction), and a plain nearest-prototype rule.  Both work on cosine
geometry: transport cost is 1 - cosine, nearest means largest cosine.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, ParameterError, UsageError

MARGINAL_TOL = 1e-6


@dataclass
class TransportPlan:
    plan: np.ndarray  # (P, K), entries sum to 1
    iterations_used: int
    converged: bool

    def __post_init__(self) -> None:
        if self.plan.ndim != 2 or np.any(self.plan < 0.0):
            raise UsageError("transport plan must be a nonnegative matrix")

    @property
    def labels(self) -> np.ndarray:
        return self.plan.argmax(axis=1)

    def marginal_errors(self) -> tuple[float, float]:
        p, k = self.plan.shape
        row = float(np.abs(self.plan.sum(axis=1) - 1.0 / p).max())
        col = float(np.abs(self.plan.sum(axis=0) - 1.0 / k).max())
        return row, col


def _cosine_cost(feats: np.ndarray, protos: np.ndarray) -> np.ndarray:
    fn = np.linalg.norm(feats, axis=1)
    pn = np.linalg.norm(protos, axis=1)
    if np.any(fn < 1e-12) or np.any(pn < 1e-12):
        raise DegenerateInputError("zero-norm row has no cosine geometry")
    cos = (feats / fn[:, None]) @ (protos / pn[:, None]).T
    return 1.0 - cos


def sinkhorn_labels(feats, protos, epsilon: float = 0.05,
                    max_iters: int = 5000) -> TransportPlan:
    """Balanced assignment of points to prototypes by entropic transport.

    Row marginals are 1/P, column marginals 1/K.  Alternating scaling runs
    until both marginals are within 1e-6 or the iteration cap is hit, in
    which case a warning reports the residual and the best plan is
    returned anyway.  Labels are the row-wise argmax of the plan.
    """
    if epsilon <= 0.0:
        raise ParameterError("entropic regularization must be positive")
    if max_iters < 1:
        raise ParameterError("need at least one scaling iteration")
    z = np.asarray(getattr(feats, "data", feats), dtype=np.float64)
    c = np.asarray(getattr(protos, "data", protos), dtype=np.float64)
    if z.ndim != 2 or c.ndim != 2 or z.shape[1] != c.shape[1]:
        raise UsageError("points and prototypes must share a feature dim")
    if z.shape[0] == 0 or c.shape[0] == 0:
        raise UsageError("transport needs at least one point and prototype")
    p, k = z.shape[0], c.shape[0]
    cost = _cosine_cost(z, c)
    kernel = np.exp(-cost / epsilon)
    row_target = np.full(p, 1.0 / p)
    col_target = np.full(k, 1.0 / k)
    u = np.ones(p)
    v = np.ones(k)
    iters = 0
    converged = False
    for iters in range(1, max_iters + 1):
        u = row_target / np.maximum(kernel @ v, 1e-300)
        v = col_target / np.maximum(kernel.T @ u, 1e-300)
        plan = (u[:, None] * kernel) * v[None, :]
        row_err = np.abs(plan.sum(axis=1) - row_target).max()
        col_err = np.abs(plan.sum(axis=0) - col_target).max()
        if max(row_err, col_err) < MARGINAL_TOL:
            converged = True
            break
    if not converged:
        warnings.warn("transport scaling stopped at the iteration cap "
                      f"(residual {max(row_err, col_err):.3e})",
                      RuntimeWarning, stacklevel=2)
    return TransportPlan(plan=plan, iterations_used=iters,
                         converged=converged)


def nearest_prototype_labels(feats, protos) -> np.ndarray:
    """Largest-cosine prototype per point; ties take the smallest index."""
    z = np.asarray(getattr(feats, "data", feats), dtype=np.float64)
    c = np.asarray(getattr(protos, "data", protos), dtype=np.float64)
    if z.ndim != 2 or c.ndim != 2 or z.shape[1] != c.shape[1]:
        raise UsageError("points and prototypes must share a feature dim")
    sims = 1.0 - _cosine_cost(z, c)
    return sims.argmax(axis=1)


def plan_to_uniform_distance(plan: TransportPlan) -> float:
    """Frobenius distance from the plan to the maximum-entropy plan."""
    p, k = plan.plan.shape
    return float(np.linalg.norm(plan.plan - 1.0 / (p * k)))
