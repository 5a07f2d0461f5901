"""Base-to-novel causal reasoning graph.

Novel features are clustered into K prototypes; a scaled dot-product
attention between base and novel prototypes yields a weighted bipartite
adjacency (incoming edges of each novel node softmax-normalized), extended
with novel-novel edges from the same attention plus unit self-loops.  Two
structural penalties shape the attention parameters: a direction loss that
drives weight off causally reversed (novel-to-base) candidate edges, and a
pruning loss that charges edges sitting below a learnable threshold.

The pruning indicator is a step function, so its loss is reported with the
hard indicator but optimized through a steep sigmoid surrogate.  Degrees
follow the convention: 1 plus the total unpruned incident weight, where a
novel node's incident set is its incoming base edges plus incoming
novel-novel edges including the explicit unit self-loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DegenerateInputError, ParameterError, UsageError
from .rng import stream

THETA_CLAMP = (0.01, 0.99)


# ---------------------------------------------------------------------------
# novel prototype clustering
# ---------------------------------------------------------------------------

@dataclass
class NovelPrototypeSet:
    vectors: np.ndarray  # (K, d)

    def __post_init__(self) -> None:
        if self.vectors.ndim != 2:
            raise UsageError("novel prototype set must be a 2-D matrix")
        if np.any(np.linalg.norm(self.vectors, axis=1) < 1e-12):
            raise DegenerateInputError("novel prototype with zero norm")


def _kmeans_once(z: np.ndarray, k: int, rng: np.random.Generator,
                 max_iters: int) -> np.ndarray | None:
    """One k-means run with k-means++ seeding; None on an empty cluster."""
    n = z.shape[0]
    centers = np.empty((k, z.shape[1]))
    centers[0] = z[rng.integers(n)]
    closest = np.full(n, np.inf)
    for i in range(1, k):
        closest = np.minimum(closest,
                             ((z - centers[i - 1]) ** 2).sum(axis=1))
        total = closest.sum()
        if total <= 0.0:
            return None  # all points coincide with chosen centers
        centers[i] = z[rng.choice(n, p=closest / total)]
    for _ in range(max_iters):
        dists = ((z[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = dists.argmin(axis=1)
        new = np.empty_like(centers)
        for c in range(k):
            members = z[assign == c]
            if members.shape[0] == 0:
                return None
            new[c] = members.mean(axis=0)
        if np.allclose(new, centers, atol=1e-12):
            centers = new
            break
        centers = new
    return centers


def cluster_novel_prototypes(feats, k: int, seed: int,
                             max_iters: int = 100) -> NovelPrototypeSet:
    """Deterministic k-means over novel features.

    A degenerate run (empty cluster from duplicate points) is retried once
    on a derived stream; a second failure raises.
    """
    if k < 1:
        raise ParameterError("K must be at least 1")
    z = np.asarray(getattr(feats, "data", feats), dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < k:
        raise UsageError("need at least K novel feature rows")
    centers = _kmeans_once(z, k, stream(seed, "kmeans"), max_iters)
    if centers is None:
        centers = _kmeans_once(z, k, stream(seed, "kmeans-retry"), max_iters)
    if centers is None:
        raise DegenerateInputError(
            "k-means produced an empty cluster twice; features too degenerate")
    return NovelPrototypeSet(vectors=centers)


# ---------------------------------------------------------------------------
# attention and adjacency
# ---------------------------------------------------------------------------

@dataclass
class AttentionParams:
    """Separate query (base side) and key (novel side) projections."""

    q_proj: Tensor  # (d, d_attn)
    k_proj: Tensor  # (d, d_attn)
    tau: float = 0.06

    def __post_init__(self) -> None:
        if self.tau <= 0.0:
            raise ParameterError("attention temperature must be positive")
        if self.q_proj.shape != self.k_proj.shape:
            raise UsageError("query and key projections must share a shape")

    def parameters(self) -> list[Tensor]:
        return [self.q_proj, self.k_proj]

    @property
    def d_attn(self) -> int:
        return self.q_proj.shape[1]


def init_attention(d: int, tau: float = 0.06) -> AttentionParams:
    """Identity-initialized projections: the initial score is the plain
    scaled dot product, a neutral starting point with no preferred axes."""
    return AttentionParams(q_proj=Tensor(np.eye(d), requires_grad=True, name="q_proj"),
                           k_proj=Tensor(np.eye(d), requires_grad=True, name="k_proj"),
                           tau=tau)


def attention_score(c, n, params: AttentionParams):
    """(Qc)·(Kn)/sqrt(d_attn) for a single vector pair."""
    ct = c if isinstance(c, Tensor) else Tensor(np.asarray(c, dtype=np.float64))
    nt = n if isinstance(n, Tensor) else Tensor(np.asarray(n, dtype=np.float64))
    q = ct.reshape(1, -1) @ params.q_proj
    key = nt.reshape(1, -1) @ params.k_proj
    return (q * key).sum() * (1.0 / math.sqrt(params.d_attn))


def _score_matrix(rows: Tensor, cols: Tensor, params: AttentionParams) -> Tensor:
    q = rows @ params.q_proj
    k = cols @ params.k_proj
    return (q @ k.T) * (1.0 / math.sqrt(params.d_attn))


@dataclass
class CausalGraph:
    """Weighted base-to-novel graph plus novel-novel edges and self-loops.

    ``adjacency`` is M×K (entry ij is the weight of edge base_i → novel_j);
    each column is a softmax, so it sums to one before pruning.
    ``novel_weights`` is K×K with unit diagonal (self-loops); entry kj is
    the weight of edge novel_k → novel_j.  ``kept_mask`` marks surviving
    base→novel edges after pruning, ``fallback_mask`` the edges kept only
    by the strongest-edge rescue of an otherwise isolated novel node.
    """

    base_vectors: np.ndarray          # (M, d)
    novel_vectors: np.ndarray         # (K, d)
    adjacency: np.ndarray             # (M, K)
    novel_weights: np.ndarray         # (K, K), unit diagonal
    theta: float
    kept_mask: np.ndarray             # (M, K) bool
    fallback_mask: np.ndarray         # (M, K) bool
    base_degrees: np.ndarray          # (M,)
    novel_degrees: np.ndarray         # (K,)

    def __post_init__(self) -> None:
        m, k = self.adjacency.shape
        if self.base_vectors.shape[0] != m or self.novel_vectors.shape[0] != k:
            raise UsageError("adjacency shape disagrees with node counts")
        if self.novel_weights.shape != (k, k):
            raise UsageError("novel-novel weight matrix must be K×K")
        if not (0.0 < self.theta < 1.0):
            raise ParameterError("threshold must lie strictly inside (0, 1)")
        if np.any(self.base_degrees < 1.0) or np.any(self.novel_degrees < 1.0):
            raise UsageError("degrees must be at least 1")

    @property
    def num_base(self) -> int:
        return self.adjacency.shape[0]

    @property
    def num_novel(self) -> int:
        return self.adjacency.shape[1]


def _degrees(adjacency: np.ndarray, novel_weights: np.ndarray,
             kept: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """1 + unpruned incident weight; novel-novel edges are never pruned."""
    surviving = adjacency * kept
    base_deg = 1.0 + surviving.sum(axis=1)
    novel_deg = 1.0 + surviving.sum(axis=0) + novel_weights.sum(axis=0)
    return base_deg, novel_deg


def build_adjacency(base_vectors: np.ndarray, novel: NovelPrototypeSet,
                    params: AttentionParams) -> CausalGraph:
    """Adjacency from temperature-scaled attention.

    Incoming base edges of each novel node are softmax-normalized over the
    base index.  Novel-novel edges use the same attention among all novel
    prototypes (the node's own score competes in its column softmax), after
    which the diagonal is pinned to a unit self-loop.  A node's self score
    dominates its column at this temperature, so cross weights only stay
    large between nearly coincident prototypes; with a single novel node
    there is just the self-loop.
    """
    c = np.asarray(base_vectors, dtype=np.float64)
    n = novel.vectors
    if c.ndim != 2 or c.shape[1] != n.shape[1]:
        raise UsageError("base and novel prototypes must share a dimension")
    with ad.no_grad():
        scores = _score_matrix(Tensor(c), Tensor(n), params).data
        adjacency = ad.softmax(scores, temperature=params.tau, axis=0)
        k = n.shape[0]
        novel_weights = np.eye(k)
        if k > 1:
            nn = _score_matrix(Tensor(n), Tensor(n), params).data
            soft = ad.softmax(nn, temperature=params.tau, axis=0)
            novel_weights = np.eye(k) + np.where(np.eye(k) > 0, 0.0, soft)
    kept = np.ones_like(adjacency, dtype=bool)
    base_deg, novel_deg = _degrees(adjacency, novel_weights, kept)
    return CausalGraph(base_vectors=c, novel_vectors=n.copy(),
                       adjacency=adjacency, novel_weights=novel_weights,
                       theta=0.5, kept_mask=kept,
                       fallback_mask=np.zeros_like(kept),
                       base_degrees=base_deg, novel_degrees=novel_deg)


# ---------------------------------------------------------------------------
# edge candidates and structural losses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EdgeCandidate:
    """A directed candidate edge between a base and a novel node.

    ``source``/``target`` are ("base", i) or ("novel", j) pairs.  The
    direction indicator is derived from them on the fly so it can never go
    stale.
    """

    source: tuple[str, int]
    target: tuple[str, int]
    weight: object  # float or Tensor scalar

    @property
    def indicator(self) -> int:
        return int(self.source[0] == "base" and self.target[0] == "novel")


def reversed_candidate_weights(base_vectors, novel_vectors,
                               params: AttentionParams) -> np.ndarray:
    """Weights of the reversed (novel→base) candidate edges.

    The same attention scores the swapped pair, but the squashing is a
    sigmoid rather than a softmax: a softmax column always carries total
    mass 1, which would make zero direction loss unreachable and its
    gradient would grind the forward adjacency toward uniformity instead.
    Sigmoid weights can all vanish, so "every candidate correctly
    oriented" is an attainable optimum.  Shape (M, K), entry ij for the
    candidate novel_j → base_i.
    """
    with ad.no_grad():
        scores = _score_matrix(Tensor(np.asarray(novel_vectors, dtype=np.float64)),
                               Tensor(np.asarray(base_vectors, dtype=np.float64)),
                               params).data
    return ad.sigmoid(scores / params.tau).T


def candidate_edges(adjacency, reversed_weights=None) -> list[EdgeCandidate]:
    """Base→novel candidates from the adjacency, plus optional reversed
    novel→base candidates (the population the direction loss penalizes)."""
    cands = []
    m, k = adjacency.shape
    for i in range(m):
        for j in range(k):
            cands.append(EdgeCandidate(("base", i), ("novel", j),
                                       adjacency[i, j]))
    if reversed_weights is not None:
        if reversed_weights.shape != (m, k):
            raise UsageError("reversed weights must match adjacency shape")
        for i in range(m):
            for j in range(k):
                cands.append(EdgeCandidate(("novel", j), ("base", i),
                                           reversed_weights[i, j]))
    return cands


def direction_loss(candidates: list[EdgeCandidate]):
    """Sum of (w·(1−indicator))²; only reversed candidates contribute."""
    total = None
    for cand in candidates:
        if cand.indicator == 1:
            continue
        w = cand.weight if isinstance(cand.weight, Tensor) \
            else Tensor(np.asarray(cand.weight, dtype=np.float64))
        term = (w * w).sum()
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.array(0.0))
    return total


def pruning_loss(weights, theta: float) -> float:
    """Hard-indicator pruning penalty: sum of w² over edges with w < θ."""
    if not (0.0 < theta < 1.0):
        raise ParameterError("threshold must lie strictly inside (0, 1)")
    w = np.asarray(getattr(weights, "data", weights), dtype=np.float64)
    below = w < theta
    return float((w[below] ** 2).sum())


def soft_pruning_loss(weights, theta, eps: float = 0.01):
    """Sigmoid relaxation of the pruning indicator, used for gradients.

    1(w < θ) becomes sigmoid((θ − w)/eps); at eps = 0.01 the relaxation is
    within 1e-9 of the step function once |w − θ| > 0.2.
    """
    if eps <= 0.0:
        raise ParameterError("relaxation width must be positive")
    wt = weights if isinstance(weights, Tensor) \
        else Tensor(np.asarray(weights, dtype=np.float64))
    th = theta if isinstance(theta, Tensor) \
        else Tensor(np.asarray(float(theta)))
    gate = ((th - wt) * (1.0 / eps)).sigmoid()
    return (gate * wt * wt).sum()


# ---------------------------------------------------------------------------
# pruning
# ---------------------------------------------------------------------------

def prune_graph(graph: CausalGraph) -> CausalGraph:
    """Drop base→novel edges below θ; rescue isolated novel nodes.

    A novel column losing every incoming base edge keeps its single
    strongest edge instead, marked in ``fallback_mask`` (propagation needs
    at least one incoming message per novel node).
    """
    kept = graph.adjacency >= graph.theta
    fallback = np.zeros_like(kept)
    for j in range(graph.num_novel):
        if not kept[:, j].any():
            best = int(np.argmax(graph.adjacency[:, j]))
            kept[best, j] = True
            fallback[best, j] = True
    base_deg, novel_deg = _degrees(graph.adjacency, graph.novel_weights, kept)
    return CausalGraph(base_vectors=graph.base_vectors,
                       novel_vectors=graph.novel_vectors,
                       adjacency=graph.adjacency,
                       novel_weights=graph.novel_weights,
                       theta=graph.theta, kept_mask=kept,
                       fallback_mask=fallback,
                       base_degrees=base_deg, novel_degrees=novel_deg)


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

@dataclass
class GraphFitConfig:
    steps: int = 150
    lr: float = 5e-2
    tau: float = 0.06
    theta_init: float = 0.5
    prune_eps: float = 0.01
    direction_weight: float = 1.0
    pruning_weight: float = 1.0
    # reversed novel→base candidates give the direction loss a nonzero
    # population to suppress; disable to fit on the oriented set alone
    reversed_candidates: bool = True

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ParameterError("need at least one fitting step")
        if self.lr <= 0.0 or self.tau <= 0.0 or self.prune_eps <= 0.0:
            raise ParameterError("lr, tau and prune_eps must be positive")
        if not (THETA_CLAMP[0] <= self.theta_init <= THETA_CLAMP[1]):
            raise ParameterError("theta_init outside the clamp range")


@dataclass
class GraphFitResult:
    graph: CausalGraph
    attention: AttentionParams
    theta: float
    trace: list[float] = field(default_factory=list)


def _forward(base: Tensor, novel: Tensor, params: AttentionParams,
             theta: Tensor, cfg: GraphFitConfig):
    """Differentiable loss with the soft pruning gate; also returns the
    hard-indicator total used for the trace and the stop check.

    The direction term is (reversed_w ** 2).sum(): correctly oriented
    candidates carry indicator 1 and drop out of the penalty, so only the
    reversed block survives.  Reversed weights are sigmoid-squashed (see
    ``reversed_candidate_weights``), so the term can actually reach zero.
    ``direction_loss`` over ``candidate_edges`` computes the identical
    value candidate by candidate; the tests pin the two routes against
    each other.
    """
    scores = _score_matrix(base, novel, params)
    adjacency = ad.softmax(scores, temperature=cfg.tau, axis=0)
    if cfg.reversed_candidates:
        rev_scores = _score_matrix(novel, base, params)
        reversed_w = ad.sigmoid(rev_scores * (1.0 / cfg.tau))
        l_dir = (reversed_w * reversed_w).sum()
    else:
        l_dir = Tensor(np.array(0.0))
    l_prune_soft = soft_pruning_loss(adjacency, theta, eps=cfg.prune_eps)
    loss = cfg.direction_weight * l_dir + cfg.pruning_weight * l_prune_soft
    hard = cfg.direction_weight * float(l_dir.data) \
        + cfg.pruning_weight * pruning_loss(adjacency.data,
                                            float(theta.data))
    return loss, hard


def fit_graph(base_vectors: np.ndarray, novel: NovelPrototypeSet,
              cfg: GraphFitConfig | None = None) -> GraphFitResult:
    """Plain gradient descent on attention projections and θ.

    The step is skipped outright when the hard-indicator objective is
    already exactly zero (correctly oriented candidates, nothing below
    threshold): that configuration is a fixed point and the surrogate
    gradient must not push parameters off it.  θ is clamped to (0.01,
    0.99) after every step.
    """
    cfg = cfg or GraphFitConfig()
    c = np.asarray(base_vectors, dtype=np.float64)
    base = Tensor(c)
    novel_t = Tensor(novel.vectors)
    params = init_attention(c.shape[1], tau=cfg.tau)
    theta = Tensor(np.asarray(float(cfg.theta_init)), requires_grad=True,
                   name="theta")
    plist = params.parameters() + [theta]
    trace: list[float] = []
    for _ in range(cfg.steps):
        loss, hard = _forward(base, novel_t, params, theta, cfg)
        trace.append(hard)
        if hard == 0.0:
            break
        grads = ad.gradients(loss, plist)
        # backtracking keeps the reported objective non-increasing even
        # when a softmax-coupled weight crosses the threshold and the hard
        # indicator would otherwise jump
        saved = [p.data.copy() for p in plist]
        step = cfg.lr
        accepted = False
        for _ in range(30):
            with ad.no_grad():
                for p, old, g in zip(plist, saved, grads):
                    p.data = old - step * g
                theta.data = np.clip(theta.data, *THETA_CLAMP)
                _, hard_new = _forward(base, novel_t, params, theta, cfg)
            if hard_new <= hard:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            with ad.no_grad():
                for p, old in zip(plist, saved):
                    p.data = old
            break
    graph = build_adjacency(c, novel, params)
    graph.theta = float(theta.data)
    graph = prune_graph(graph)
    return GraphFitResult(graph=graph, attention=params,
                          theta=float(theta.data), trace=trace)


# ---------------------------------------------------------------------------
# serialization (consumed by the CLI inspect subcommand)
# ---------------------------------------------------------------------------

def graph_to_doc(graph: CausalGraph) -> dict:
    return {
        "base_vectors": graph.base_vectors.tolist(),
        "novel_vectors": graph.novel_vectors.tolist(),
        "adjacency": graph.adjacency.tolist(),
        "novel_weights": graph.novel_weights.tolist(),
        "theta": graph.theta,
        "kept_mask": graph.kept_mask.astype(int).tolist(),
        "fallback_mask": graph.fallback_mask.astype(int).tolist(),
        "base_degrees": graph.base_degrees.tolist(),
        "novel_degrees": graph.novel_degrees.tolist(),
    }


def graph_from_doc(doc: dict) -> CausalGraph:
    try:
        return CausalGraph(
            base_vectors=np.array(doc["base_vectors"], dtype=np.float64),
            novel_vectors=np.array(doc["novel_vectors"], dtype=np.float64),
            adjacency=np.array(doc["adjacency"], dtype=np.float64),
            novel_weights=np.array(doc["novel_weights"], dtype=np.float64),
            theta=float(doc["theta"]),
            kept_mask=np.array(doc["kept_mask"], dtype=bool),
            fallback_mask=np.array(doc["fallback_mask"], dtype=bool),
            base_degrees=np.array(doc["base_degrees"], dtype=np.float64),
            novel_degrees=np.array(doc["novel_degrees"], dtype=np.float64))
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"malformed graph document: {exc}") from exc
