import itertools

import numpy as np
import pytest

from mle_struct.exceptions import InfeasibleModelError, SizeLimitError, StructureError
from mle_struct.models import (BipartiteMatching, Dataset, GeneralMatching, PairwiseBinaryGrid,
                               clamp_analysis, edge_weight_matrix, enumerate_structures,
                               init_pseudomarginals, validate_local_polytope)

from conftest import random_lattice, random_tree_grid


def _perfect_matchings(n_nodes, edges):
    """Brute force: subsets of n/2 edges that cover every node once."""
    out = []
    for combo in itertools.combinations(range(len(edges)), n_nodes // 2):
        nodes = [v for k in combo for v in edges[k]]
        if len(set(nodes)) == n_nodes:
            out.append(combo)
    return out


class TestValidateLocalPolytope:
    def test_uniform_edge_model(self):
        g = PairwiseBinaryGrid(2, [(0, 1)], np.zeros((2, 1)), np.zeros((1, 1)))
        tau = g.join(np.full((2, 2), 0.5), np.full((1, 2, 2), 0.25))
        assert validate_local_polytope(tau, g)

    def test_unnormalized_node(self):
        g = PairwiseBinaryGrid(2, [(0, 1)], np.zeros((2, 1)), np.zeros((1, 1)))
        node = np.array([[0.7, 0.4], [0.5, 0.5]])
        tau = g.join(node, np.full((1, 2, 2), 0.25))
        assert not validate_local_polytope(tau, g)

    def test_inconsistent_edge_marginal(self):
        g = PairwiseBinaryGrid(2, [(0, 1)], np.zeros((2, 1)), np.zeros((1, 1)))
        tau = g.join(np.full((2, 2), 0.5), np.array([[[0.5, 0.0], [0.25, 0.25]]]))
        assert not validate_local_polytope(tau, g)

    def test_birkhoff_center(self):
        assert validate_local_polytope(np.full(9, 1 / 3), BipartiteMatching.indicator(3))

    def test_not_doubly_stochastic(self):
        tau = np.full(9, 1 / 3)
        tau[0] += 0.1
        assert not validate_local_polytope(tau, BipartiteMatching.indicator(3))

    def test_dimension_mismatch(self):
        with pytest.raises(StructureError):
            validate_local_polytope(np.ones(5), BipartiteMatching.indicator(3))


class TestInitPseudomarginals:
    def test_bipartite_uniform(self):
        np.testing.assert_array_equal(init_pseudomarginals(BipartiteMatching.indicator(4)), 0.25)

    def test_k4(self):
        # oracle: average of the three perfect matchings of K4
        k4 = GeneralMatching.from_matrices(np.ones((1, 4, 4)) - np.eye(4))
        pm = _perfect_matchings(4, k4.edges.tolist())
        assert len(pm) == 3
        expected = np.zeros(k4.dim)
        for combo in pm:
            expected[list(combo)] += 1 / 3
        tau = init_pseudomarginals(k4)
        np.testing.assert_allclose(tau, expected, atol=1e-15)
        np.testing.assert_allclose(tau, 1 / 3, atol=1e-15)

    def test_single_edge_grid(self):
        g = PairwiseBinaryGrid(2, [(0, 1)], np.zeros((2, 1)), np.zeros((1, 1)))
        node, edge = g.split(init_pseudomarginals(g))
        np.testing.assert_array_equal(node, 0.5)
        np.testing.assert_array_equal(edge, 0.25)

    def test_no_perfect_matching(self):
        with pytest.raises(InfeasibleModelError):
            init_pseudomarginals(GeneralMatching(4, [(0, 1), (0, 2), (0, 3)], np.ones((1, 3))))

    @pytest.mark.parametrize("seed", range(10))
    def test_random_graphs_interior(self, seed):
        rng = np.random.default_rng(seed)
        n = 2 * int(rng.integers(2, 5))
        adj = np.triu(rng.random((n, n)) < 0.6, 1)
        adj[np.arange(0, n, 2), np.arange(1, n, 2)] = True  # guarantee a perfect matching
        F = rng.normal(size=(2, n, n))
        g = GeneralMatching.from_matrices(F + F.transpose(0, 2, 1), adj | adj.T)
        tau = g.init_pseudomarginals()
        assert g.validate(tau, tol=1e-12)
        mask = g.free_mask
        assert np.all((tau[mask] > 0) & (tau[mask] < 1))
        forced, forbidden = g.clamps
        np.testing.assert_array_equal(tau[list(forced)], 1.0)
        np.testing.assert_array_equal(tau[list(forbidden)], 0.0)

    @pytest.mark.parametrize("model", [BipartiteMatching.indicator(5),
                                       BipartiteMatching.indicator(3, perfect=False),
                                       random_lattice(np.random.default_rng(0))],
                             ids=["bipartite", "imperfect", "grid"])
    def test_passes_validation(self, model):
        assert validate_local_polytope(init_pseudomarginals(model), model, tol=1e-12)


class TestClampAnalysis:
    def test_path(self):
        g = GeneralMatching(4, [(0, 1), (1, 2), (2, 3)], np.ones((1, 3)))
        forced, forbidden = clamp_analysis(g)
        assert forced == {g.edge_index(0, 1), g.edge_index(2, 3)}
        assert forbidden == {g.edge_index(1, 2)}

    def test_complete_bipartite(self):
        assert clamp_analysis(BipartiteMatching.indicator(3)) == (set(), set())

    def test_k4_minus_edge(self):
        # oracle: edges in every / no perfect matching by enumeration
        edges = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3)]
        g = GeneralMatching(4, edges, np.ones((1, 5)))
        pm = _perfect_matchings(4, g.edges.tolist())
        used = [set(c) for c in pm]
        forced = set.intersection(*used)
        forbidden = set(range(g.dim)) - set.union(*used)
        assert clamp_analysis(g) == (forced, forbidden)
        # without (2, 3) the edge (0, 1) cannot be completed
        assert forced == set() and forbidden == {g.edge_index(0, 1)}

    @pytest.mark.parametrize("seed", range(15))
    def test_removing_forbidden_keeps_matchings(self, seed):
        rng = np.random.default_rng(100 + seed)
        n = 2 * int(rng.integers(2, 6))
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.45]
        pairs += [(i, i + 1) for i in range(0, n, 2) if (i, i + 1) not in pairs]
        g = GeneralMatching(n, pairs, np.ones((1, len(pairs))))
        forced, forbidden = clamp_analysis(g)
        edges = g.edges.tolist()
        before = {frozenset(tuple(edges[k]) for k in c) for c in _perfect_matchings(n, edges)}
        kept = [e for k, e in enumerate(edges) if k not in forbidden]
        after = {frozenset(tuple(kept[k]) for k in c) for c in _perfect_matchings(n, kept)}
        assert before == after
        for k in forced:
            assert all(tuple(edges[k]) in m for m in before)


class TestEdgeWeightMatrix:
    def test_zero_theta(self, small_bipartite):
        np.testing.assert_array_equal(edge_weight_matrix(small_bipartite, np.zeros(3)), 0.0)

    def test_identity_feature(self):
        m = BipartiteMatching(np.eye(4)[None])
        np.testing.assert_array_equal(edge_weight_matrix(m, [2.0]), 2 * np.eye(4))

    def test_random_sum(self, rng):
        F = rng.normal(size=(2, 5, 5))
        theta = rng.normal(size=2)
        expected = np.zeros((5, 5))
        for i in range(5):
            for j in range(5):
                expected[i, j] = theta[0] * F[0, i, j] + theta[1] * F[1, i, j]
        np.testing.assert_allclose(edge_weight_matrix(BipartiteMatching(F), theta), expected,
                                   rtol=1e-14)

    def test_general_symmetric(self, rng):
        F = rng.normal(size=(2, 4, 4))
        F = F + F.transpose(0, 2, 1)
        g = GeneralMatching.from_matrices(F)
        theta = rng.normal(size=2)
        W = edge_weight_matrix(g, theta)
        expected = np.tensordot(theta, F, axes=1)
        np.fill_diagonal(expected, 0.0)
        np.testing.assert_allclose(W, expected, rtol=1e-13)

    def test_length_mismatch(self, small_bipartite):
        with pytest.raises(StructureError):
            edge_weight_matrix(small_bipartite, np.zeros(2))


class TestStructures:
    def test_general_node_cap(self):
        with pytest.raises(SizeLimitError):
            GeneralMatching(18, [(0, 1)], np.ones((1, 1)))

    def test_odd_perfect(self):
        with pytest.raises(StructureError):
            GeneralMatching(3, [(0, 1), (1, 2)], np.ones((1, 2)))

    def test_bad_edge(self):
        with pytest.raises(StructureError):
            PairwiseBinaryGrid(2, [(0, 2)], np.zeros((2, 1)), np.zeros((1, 1)))

    def test_edges_are_sorted_with_features(self):
        g = GeneralMatching(4, [(3, 2), (0, 1)], [[5.0, 7.0]])
        assert g.edges.tolist() == [[0, 1], [2, 3]]
        np.testing.assert_array_equal(g.features, [[7.0, 5.0]])

    def test_bad_permutation(self):
        with pytest.raises(StructureError):
            BipartiteMatching.indicator(3).embed([0, 0, 1])

    @pytest.mark.parametrize("model", [BipartiteMatching.indicator(4),
                                       BipartiteMatching.indicator(3, perfect=False),
                                       GeneralMatching.from_matrices(np.ones((1, 6, 6))),
                                       random_tree_grid(np.random.default_rng(3), 5)],
                             ids=["bipartite", "imperfect", "general", "grid"])
    def test_embedded_observations_are_vertices(self, model):
        for y in enumerate_structures(model):
            assert model.validate(y, tol=0.0)
            np.testing.assert_array_equal(model.embed(model.decode(y)), y)


class TestDataset:
    def test_shared_model_features(self, small_bipartite, rng):
        perms = [rng.permutation(4) for _ in range(6)]
        data = Dataset.shared(small_bipartite, perms)
        assert data.M == 6 and data.shared_features is not None
        expected = sum(small_bipartite.feature_matrix.T @ small_bipartite.embed(p) for p in perms)
        np.testing.assert_allclose(data.empirical_features, expected, rtol=1e-13)

    def test_pullback_matches_per_sample(self, rng):
        models = [BipartiteMatching(rng.normal(size=(2, 3, 3))) for _ in range(4)]
        data = Dataset.from_observations(models, [rng.permutation(3) for _ in range(4)])
        assert data.shared_features is None
        tau = rng.random((4, 9))
        expected = sum(m.feature_matrix.T @ t for m, t in zip(models, tau))
        np.testing.assert_allclose(data.pullback(tau), expected, rtol=1e-13)
        r = rng.normal(size=2)
        np.testing.assert_allclose(data.pushforward(r),
                                   [m.feature_matrix @ r for m in models], rtol=1e-13)

    def test_topology_mismatch(self):
        with pytest.raises(StructureError):
            Dataset.from_observations([BipartiteMatching.indicator(3),
                                       BipartiteMatching.indicator(4)],
                                      [[0, 1, 2], [0, 1, 2, 3]])

    def test_observations_satisfy_polytope(self, rng):
        g = random_lattice(rng)
        labels = [rng.integers(0, 2, size=9) for _ in range(5)]
        data = Dataset.shared(g, labels)
        for y in data.observations:
            assert g.validate(y, tol=0.0)
