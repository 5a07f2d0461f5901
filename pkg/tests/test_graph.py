"""Novel-prototype clustering, attention adjacency, structural losses."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causalncd import autodiff as ad
from causalncd import graph as cg
from causalncd.autodiff import Tensor
from causalncd.errors import DegenerateInputError, ParameterError, UsageError


def blob_data(rng, centers, per_blob=16, spread=0.1):
    pts = [c + spread * rng.standard_normal((per_blob, len(c)))
           for c in centers]
    return np.vstack(pts)


# ---------------------------------------------------------------------------
# k-means clustering
# ---------------------------------------------------------------------------

def test_kmeans_recovers_separated_blob_means():
    rng = np.random.default_rng(3)
    z = blob_data(rng, [np.array([5.0, 0.0]), np.array([-5.0, 0.0])])
    protos = cg.cluster_novel_prototypes(z, 2, seed=0)
    # oracle: exhaustive blob membership is unambiguous at this separation
    means = np.stack([z[:16].mean(axis=0), z[16:].mean(axis=0)])
    got = protos.vectors[np.argsort(-protos.vectors[:, 0])]
    want = means[np.argsort(-means[:, 0])]
    assert np.allclose(got, want, atol=1e-6)


def test_kmeans_deterministic_per_seed():
    rng = np.random.default_rng(5)
    z = blob_data(rng, [np.zeros(3), np.ones(3) * 4, -np.ones(3) * 4])
    a = cg.cluster_novel_prototypes(z, 3, seed=11).vectors
    b = cg.cluster_novel_prototypes(z, 3, seed=11).vectors
    assert np.array_equal(a, b)


def test_kmeans_degenerate_duplicates_raise_after_retry():
    z = np.ones((6, 3))
    with pytest.raises(DegenerateInputError):
        cg.cluster_novel_prototypes(z, 2, seed=0)
    # more clusters than distinct points fails the same way
    z2 = np.vstack([np.zeros((3, 2)), np.ones((2, 2))])
    with pytest.raises(DegenerateInputError):
        cg.cluster_novel_prototypes(z2, 3, seed=0)


def test_kmeans_argument_validation():
    with pytest.raises(ParameterError):
        cg.cluster_novel_prototypes(np.ones((4, 2)), 0, seed=0)
    with pytest.raises(UsageError):
        cg.cluster_novel_prototypes(np.ones((1, 2)), 2, seed=0)


def test_novel_prototype_set_rejects_zero_rows():
    with pytest.raises(DegenerateInputError):
        cg.NovelPrototypeSet(vectors=np.zeros((2, 3)))


# ---------------------------------------------------------------------------
# attention scores
# ---------------------------------------------------------------------------

def test_attention_score_identity_init_is_scaled_dot():
    params = cg.init_attention(4)
    e1 = np.array([1.0, 0.0, 0.0, 0.0])
    val = float(cg.attention_score(e1, e1, params).data)
    assert val == pytest.approx(0.5, abs=1e-12)  # 1/sqrt(4)
    other = np.array([0.0, 1.0, 0.0, 0.0])
    assert float(cg.attention_score(e1, other, params).data) == 0.0


def test_attention_score_matches_manual_projection():
    rng = np.random.default_rng(9)
    q = rng.standard_normal((3, 5))
    k = rng.standard_normal((3, 5))
    params = cg.AttentionParams(q_proj=Tensor(q), k_proj=Tensor(k), tau=0.06)
    c = rng.standard_normal(3)
    n = rng.standard_normal(3)
    want = float((c @ q) @ (n @ k)) / np.sqrt(5)
    assert float(cg.attention_score(c, n, params).data) == pytest.approx(want, rel=1e-12)


def test_attention_params_validation():
    with pytest.raises(ParameterError):
        cg.AttentionParams(q_proj=Tensor(np.eye(2)), k_proj=Tensor(np.eye(2)),
                           tau=0.0)
    with pytest.raises(UsageError):
        cg.AttentionParams(q_proj=Tensor(np.eye(2)),
                           k_proj=Tensor(np.eye(3)), tau=0.06)


# ---------------------------------------------------------------------------
# adjacency construction
# ---------------------------------------------------------------------------

def test_adjacency_softmax_frozen_example():
    # two base nodes scoring 0.1 and 0.0 against one novel node
    base = np.array([[0.1], [0.0]])
    novel = cg.NovelPrototypeSet(vectors=np.array([[1.0]]))
    g = cg.build_adjacency(base, novel, cg.init_attention(1))
    assert g.adjacency[0, 0] == pytest.approx(0.84113, abs=1e-4)
    assert g.adjacency[1, 0] == pytest.approx(0.15886, abs=1e-4)
    assert g.adjacency[:, 0].sum() == pytest.approx(1.0, abs=1e-12)


def test_single_pair_degrees_match_hand_count():
    # one base, one novel: the only column softmaxes to weight 1, the novel
    # node adds a unit self-loop, so degrees are 2 and 3
    base = np.array([[1.0, 0.0]])
    novel = cg.NovelPrototypeSet(vectors=np.array([[1.0, 0.0]]))
    g = cg.build_adjacency(base, novel, cg.init_attention(2))
    assert g.adjacency[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert g.novel_weights[0, 0] == 1.0
    assert g.base_degrees[0] == pytest.approx(2.0, abs=1e-12)
    assert g.novel_degrees[0] == pytest.approx(3.0, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 5), st.integers(1, 4),
       st.integers(2, 6))
def test_adjacency_columns_always_normalized(seed, m, k, d):
    rng = np.random.default_rng(seed)
    base = rng.standard_normal((m, d))
    novel = cg.NovelPrototypeSet(vectors=rng.standard_normal((k, d)))
    params = cg.AttentionParams(q_proj=Tensor(rng.standard_normal((d, d))),
                                k_proj=Tensor(rng.standard_normal((d, d))),
                                tau=0.06)
    g = cg.build_adjacency(base, novel, params)
    assert np.all(np.abs(g.adjacency.sum(axis=0) - 1.0) < 1e-9)
    assert np.all(np.diag(g.novel_weights) == 1.0)
    if k > 1:
        off = g.novel_weights - np.eye(k)
        assert np.all((off >= 0.0) & (off <= 1.0))
        # cross weights are the non-self shares of a column softmax that the
        # self score takes part in, so each column's share is below one
        assert np.all(off.sum(axis=0) < 1.0 + 1e-9)


def test_novel_cross_weights_vanish_for_separated_prototypes():
    # each novel node's self score takes part in its own column softmax, so
    # distinct directions give near-zero cross weights while nearly
    # coincident prototypes split their column about evenly
    base = np.array([[1.0, 0.0, 0.0]])
    apart = cg.NovelPrototypeSet(vectors=np.array([[2.0, 0.0, 0.0],
                                                   [0.0, 2.0, 0.0]]))
    g = cg.build_adjacency(base, apart, cg.init_attention(3))
    off = g.novel_weights - np.eye(2)
    assert np.all(off < 1e-6)
    close = cg.NovelPrototypeSet(vectors=np.array([[2.0, 0.0, 0.0],
                                                   [2.0, 1e-4, 0.0]]))
    g2 = cg.build_adjacency(base, close, cg.init_attention(3))
    off2 = g2.novel_weights - np.eye(2)
    assert np.all(np.abs(off2[~np.eye(2, dtype=bool)] - 0.5) < 0.01)


def test_causal_graph_field_validation():
    base = np.ones((2, 2))
    novel = np.ones((1, 2))
    adj = np.array([[0.6], [0.4]])
    ok = dict(base_vectors=base, novel_vectors=novel, adjacency=adj,
              novel_weights=np.eye(1), theta=0.5,
              kept_mask=np.ones_like(adj, dtype=bool),
              fallback_mask=np.zeros_like(adj, dtype=bool),
              base_degrees=np.array([1.6, 1.4]), novel_degrees=np.array([3.0]))
    cg.CausalGraph(**ok)
    with pytest.raises(ParameterError):
        cg.CausalGraph(**{**ok, "theta": 1.0})
    with pytest.raises(UsageError):
        cg.CausalGraph(**{**ok, "novel_weights": np.eye(2)})
    with pytest.raises(UsageError):
        cg.CausalGraph(**{**ok, "base_degrees": np.array([0.5, 1.4])})


# ---------------------------------------------------------------------------
# direction loss
# ---------------------------------------------------------------------------

def test_direction_loss_frozen_examples():
    fwd = cg.EdgeCandidate(("base", 0), ("novel", 0), 0.9)
    rev = cg.EdgeCandidate(("novel", 0), ("base", 0), 0.5)
    assert float(cg.direction_loss([fwd, rev]).data) == pytest.approx(0.25, abs=1e-12)
    revs = [cg.EdgeCandidate(("novel", 0), ("base", 0), 0.3),
            cg.EdgeCandidate(("novel", 1), ("base", 0), 0.4)]
    assert float(cg.direction_loss([fwd] + revs).data) == pytest.approx(0.25, abs=1e-12)


def test_direction_loss_zero_on_oriented_set():
    cands = cg.candidate_edges(np.array([[0.7, 0.2], [0.3, 0.8]]))
    assert all(c.indicator == 1 for c in cands)
    assert float(cg.direction_loss(cands).data) == 0.0


def test_direction_loss_candidate_route_matches_tensor_route():
    rng = np.random.default_rng(2)
    adj = rng.random((3, 2))
    rev = rng.random((3, 2))
    cands = cg.candidate_edges(adj, rev)
    assert len(cands) == 12
    via_candidates = float(cg.direction_loss(cands).data)
    assert via_candidates == pytest.approx(float((rev ** 2).sum()), abs=1e-12)


def test_candidate_indicator_never_stale():
    c = cg.EdgeCandidate(("novel", 2), ("base", 1), 0.3)
    assert c.indicator == 0
    c2 = cg.EdgeCandidate(("base", 1), ("novel", 2), 0.3)
    assert c2.indicator == 1


# ---------------------------------------------------------------------------
# pruning loss
# ---------------------------------------------------------------------------

def test_pruning_loss_frozen_examples():
    assert cg.pruning_loss(np.array([0.2, 0.6]), 0.5) == pytest.approx(0.04, abs=1e-12)
    assert cg.pruning_loss(np.array([0.2, 0.3]), 0.5) == pytest.approx(0.13, abs=1e-12)
    assert cg.pruning_loss(np.array([0.6, 0.7]), 0.5) == 0.0


def test_pruning_loss_threshold_validation():
    with pytest.raises(ParameterError):
        cg.pruning_loss(np.array([0.2]), 0.0)
    with pytest.raises(ParameterError):
        cg.pruning_loss(np.array([0.2]), 1.0)


def test_soft_pruning_tracks_hard_away_from_threshold():
    w = np.array([0.1, 0.25, 0.75, 0.9])
    hard = cg.pruning_loss(w, 0.5)
    soft = float(cg.soft_pruning_loss(w, 0.5).data)
    assert soft == pytest.approx(hard, abs=1e-9)


def test_soft_pruning_gradients_match_finite_differences():
    w = Tensor(np.array([0.3, 0.45, 0.5, 0.55, 0.62, 0.8]),
               requires_grad=True, name="w")
    th = Tensor(np.asarray(0.5), requires_grad=True, name="theta")
    reports = ad.grad_check(lambda: cg.soft_pruning_loss(w, th), [w, th])
    assert ad.max_rel_error(reports) <= 1e-4


def test_direction_loss_gradients_through_attention():
    rng = np.random.default_rng(7)
    base = Tensor(rng.standard_normal((2, 3)))
    novel = Tensor(rng.standard_normal((2, 3)))
    q = Tensor(np.eye(3) + 0.1 * rng.standard_normal((3, 3)),
               requires_grad=True, name="q")
    k = Tensor(np.eye(3) + 0.1 * rng.standard_normal((3, 3)),
               requires_grad=True, name="k")

    def loss_fn():
        params = cg.AttentionParams(q_proj=q, k_proj=k, tau=0.06)
        rev = ad.sigmoid(cg._score_matrix(novel, base, params) * (1.0 / 0.06))
        return (rev * rev).sum()

    assert ad.max_rel_error(ad.grad_check(loss_fn, [q, k])) <= 1e-4


def test_reversed_weights_match_fit_objective_route():
    # the standalone reversed-weight construction and the fitting loss must
    # price the same candidates identically
    rng = np.random.default_rng(11)
    base = rng.standard_normal((4, 3))
    novel = cg.NovelPrototypeSet(vectors=rng.standard_normal((2, 3)))
    params = cg.init_attention(3)
    rev = cg.reversed_candidate_weights(base, novel.vectors, params)
    assert rev.shape == (4, 2)
    assert np.all((rev > 0.0) & (rev < 1.0))
    cands = cg.candidate_edges(np.full((4, 2), 0.25), rev)
    via_candidates = float(cg.direction_loss(cands).data)
    cfg = cg.GraphFitConfig()
    _, hard = cg._forward(Tensor(base), Tensor(novel.vectors), params,
                          Tensor(np.asarray(1e-12)), cfg)
    # theta below any surviving softmax weight prunes nothing, so the hard
    # total is the direction term alone
    assert via_candidates == pytest.approx(hard, abs=1e-12)


# ---------------------------------------------------------------------------
# pruning the graph
# ---------------------------------------------------------------------------

def hand_graph(adjacency, theta, novel_weights=None):
    m, k = adjacency.shape
    nw = np.eye(k) if novel_weights is None else novel_weights
    kept = np.ones_like(adjacency, dtype=bool)
    bd, nd = cg._degrees(adjacency, nw, kept)
    return cg.CausalGraph(base_vectors=np.eye(m, 3), novel_vectors=np.eye(k, 3),
                          adjacency=adjacency, novel_weights=nw, theta=theta,
                          kept_mask=kept, fallback_mask=np.zeros_like(kept),
                          base_degrees=bd, novel_degrees=nd)


def test_prune_drops_weak_edges_and_recomputes_degrees():
    adj = np.array([[0.7, 0.2], [0.3, 0.8]])
    pruned = cg.prune_graph(hand_graph(adj, 0.5))
    assert pruned.kept_mask.tolist() == [[True, False], [False, True]]
    assert not pruned.fallback_mask.any()
    assert np.allclose(pruned.base_degrees, [1.7, 1.8])
    # novel degree: 1 + surviving incoming + unit self-loop
    assert np.allclose(pruned.novel_degrees, [2.7, 2.8])
    assert pruned.theta == 0.5
    assert np.array_equal(pruned.adjacency, adj)


def test_prune_keeps_strongest_edge_of_isolated_novel_node():
    adj = np.array([[0.4, 0.45], [0.6, 0.55]])
    pruned = cg.prune_graph(hand_graph(adj, 0.7))
    assert pruned.kept_mask.tolist() == [[False, False], [True, True]]
    assert pruned.fallback_mask.tolist() == [[False, False], [True, True]]
    assert np.allclose(pruned.novel_degrees, [2.6, 2.55])


def test_prune_boundary_weight_survives():
    # the drop condition is strict: w < theta, so w == theta stays
    adj = np.array([[0.5], [0.5]])
    pruned = cg.prune_graph(hand_graph(adj, 0.5))
    assert pruned.kept_mask.all()


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def test_fit_graph_zero_loss_is_exact_fixed_point():
    # identical base rows give a uniform column softmax of 0.5 each; with
    # theta at 0.5 nothing is below threshold and with reversed candidates
    # disabled the direction loss is empty: parameters must not move
    base = np.array([[1.0, 0.0], [1.0, 0.0]])
    novel = cg.NovelPrototypeSet(vectors=np.array([[0.5, 0.5]]))
    cfg = cg.GraphFitConfig(steps=40, reversed_candidates=False,
                            theta_init=0.5)
    res = cg.fit_graph(base, novel, cfg)
    assert res.trace == [0.0]
    assert np.array_equal(res.attention.q_proj.data, np.eye(2))
    assert np.array_equal(res.attention.k_proj.data, np.eye(2))
    assert res.theta == 0.5


def test_fit_graph_loss_non_increasing_early():
    rng = np.random.default_rng(13)
    base = rng.standard_normal((3, 4))
    novel = cg.NovelPrototypeSet(vectors=rng.standard_normal((2, 4)))
    res = cg.fit_graph(base, novel, cg.GraphFitConfig(steps=60))
    assert len(res.trace) >= 2
    horizon = min(50, len(res.trace))
    for a, b in zip(res.trace[:horizon - 1], res.trace[1:horizon]):
        assert b <= a
    assert res.trace[-1] < res.trace[0]
    assert 0.01 <= res.theta <= 0.99


def test_fit_graph_base_permutation_equivariance():
    rng = np.random.default_rng(21)
    base = rng.standard_normal((4, 3))
    novel = cg.NovelPrototypeSet(vectors=rng.standard_normal((2, 3)))
    perm = np.array([2, 0, 3, 1])
    cfg = cg.GraphFitConfig(steps=25)
    res = cg.fit_graph(base, novel, cfg)
    res_p = cg.fit_graph(base[perm], novel, cfg)
    assert np.allclose(res_p.graph.adjacency, res.graph.adjacency[perm],
                       atol=1e-10)
    assert np.array_equal(res_p.graph.kept_mask, res.graph.kept_mask[perm])
    assert res_p.theta == pytest.approx(res.theta, abs=1e-12)
    assert np.allclose(res_p.graph.novel_degrees, res.graph.novel_degrees,
                       atol=1e-10)


def test_fit_graph_config_validation():
    with pytest.raises(ParameterError):
        cg.GraphFitConfig(steps=0)
    with pytest.raises(ParameterError):
        cg.GraphFitConfig(theta_init=0.005)
    with pytest.raises(ParameterError):
        cg.GraphFitConfig(lr=0.0)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def test_graph_doc_round_trip():
    adj = np.array([[0.7, 0.2], [0.3, 0.8]])
    g = cg.prune_graph(hand_graph(adj, 0.5))
    doc = cg.graph_to_doc(g)
    back = cg.graph_from_doc(doc)
    assert np.allclose(back.adjacency, g.adjacency)
    assert np.array_equal(back.kept_mask, g.kept_mask)
    assert back.theta == g.theta
    with pytest.raises(UsageError):
        cg.graph_from_doc({"theta": 0.5})
