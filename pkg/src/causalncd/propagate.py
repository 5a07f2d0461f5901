"""Parameter-free graph convolution over the pruned causal graph.

Base prototypes broadcast their representations to novel prototypes along
surviving edges; novel prototypes also exchange messages among themselves
and keep a unit self-loop.  Messages are normalized by sqrt(d_src * d_dst)
with the degrees stored on the graph, passed through a LeakyReLU, and the
result overwrites only the novel side: base features are read-only inputs,
information flows from known classes to novel ones and never back.

After propagation each novel prototype is matched to its most similar base
prototype by cosine; every novel point inherits the label of the cluster it
belongs to, with a confidence from the softmax over the prototype's
similarity row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .deconfound import PrototypeSet
from .errors import DegenerateInputError, ParameterError, UsageError
from .graph import CausalGraph


@dataclass
class GcnParams:
    num_layers: int = 3
    leaky_slope: float = 0.01

    def __post_init__(self) -> None:
        if self.num_layers < 1:
            raise ParameterError("propagation needs at least one layer")
        if not (0.0 <= self.leaky_slope <= 1.0):
            raise ParameterError("leaky slope must be in [0, 1]")


def gcn_layer(graph: CausalGraph, base_feats: np.ndarray,
              novel_feats: np.ndarray, params: GcnParams) -> np.ndarray:
    """One message-passing update of the novel features.

    For novel node j: LeakyReLU of the degree-normalized sum of surviving
    base messages w_ij/sqrt(d_i d_j) * c_i plus novel-novel messages
    w_kj/sqrt(d_k d_j) * n_k (the unit self-loop is part of the novel-novel
    matrix).  Base features are returned untouched by construction: the
    function only produces the novel side.
    """
    c = np.asarray(base_feats, dtype=np.float64)
    n = np.asarray(novel_feats, dtype=np.float64)
    m, k = graph.adjacency.shape
    if c.shape[0] != m or n.shape[0] != k or c.shape[1] != n.shape[1]:
        raise UsageError("feature shapes disagree with the graph")
    surviving = graph.adjacency * graph.kept_mask
    db = graph.base_degrees
    dn = graph.novel_degrees
    # (M, K) coefficients w_ij / sqrt(d_i d_j), then messages via matmul
    base_coef = surviving / np.sqrt(db[:, None] * dn[None, :])
    novel_coef = graph.novel_weights / np.sqrt(dn[:, None] * dn[None, :])
    pre = base_coef.T @ c + novel_coef.T @ n
    return ad.leaky_relu(pre, slope=params.leaky_slope)


def propagate(graph: CausalGraph, base_feats: np.ndarray,
              novel_feats: np.ndarray, params: GcnParams) -> np.ndarray:
    """Apply gcn_layer num_layers times; returns the final novel features."""
    out = np.asarray(novel_feats, dtype=np.float64)
    for _ in range(params.num_layers):
        out = gcn_layer(graph, base_feats, out, params)
    if not np.all(np.isfinite(out)):
        raise DegenerateInputError("propagation produced non-finite features")
    return out


@dataclass
class PseudoLabeling:
    """Per-prototype and per-point pseudo-labels over the novel pool."""

    prototype_labels: np.ndarray     # (K,) ints in [0, M)
    prototype_confidence: np.ndarray  # (K,) floats in [0, 1]
    point_labels: np.ndarray         # (n,) ints in [0, M)
    point_confidence: np.ndarray     # (n,) floats in [0, 1]

    def __post_init__(self) -> None:
        if self.point_labels.shape != self.point_confidence.shape:
            raise UsageError("per-point labels and confidences must align")
        if np.any(self.prototype_confidence < 0.0) \
                or np.any(self.prototype_confidence > 1.0):
            raise UsageError("confidence must lie in [0, 1]")


def assign_pseudo_labels(n_final: np.ndarray, base: PrototypeSet,
                         assignments, *,
                         pick_least_similar: bool = False) -> PseudoLabeling:
    """Label each refined novel prototype with its nearest base prototype.

    ``assignments`` maps every novel point to its cluster index; points
    inherit their cluster's label and confidence.  Confidence is the
    largest entry of the softmax over the prototype's cosine row.  Ties go
    to the smallest base index.  ``pick_least_similar`` flips the argmax to
    an argmin for the alternative reading of the matching rule.
    """
    n = np.asarray(n_final, dtype=np.float64)
    if n.ndim != 2 or n.shape[1] != base.vectors.shape[1]:
        raise UsageError("refined prototypes must match the base dimension")
    if np.any(np.linalg.norm(n, axis=1) < 1e-12):
        raise DegenerateInputError("cannot label a zero-norm prototype")
    assign = np.asarray(assignments, dtype=np.int64).reshape(-1)
    if assign.size and (assign.min() < 0 or assign.max() >= n.shape[0]):
        raise UsageError("cluster assignment outside the prototype range")
    sims = np.array([[ad.cosine_sim(n[j], base.vectors[i])
                      for i in range(base.vectors.shape[0])]
                     for j in range(n.shape[0])])
    pick = sims.argmin(axis=1) if pick_least_similar else sims.argmax(axis=1)
    conf = ad.softmax(sims, axis=1).max(axis=1)
    return PseudoLabeling(prototype_labels=pick.astype(np.int64),
                          prototype_confidence=conf,
                          point_labels=pick[assign],
                          point_confidence=conf[assign])


def labeling_rows(labeling: PseudoLabeling) -> list[dict]:
    """Flat export rows: one {point index, label, confidence} per point."""
    return [{"point_index": int(i),
             "pseudo_label": int(lab),
             "confidence": float(conf)}
            for i, (lab, conf) in enumerate(zip(labeling.point_labels,
                                                labeling.point_confidence))]
