import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mle_struct.exact import finite_difference_check
from mle_struct.exceptions import DomainError, GradientUndefinedError
from mle_struct.free_energy import (energy, entropy, entropy_rw_grid,
                                    entropy_rw_grid_mutual_info, entropy_rw_matching,
                                    free_energy, free_energy_value, grad_entropy, xlogx)
from mle_struct.models import (BipartiteMatching, GeneralMatching, PairwiseBinaryGrid,
                               enumerate_structures)

from conftest import random_interior, random_lattice, random_tree_grid

LN2 = np.log(2.0)


def _edge_model(rho_like=None):
    return PairwiseBinaryGrid(2, [(0, 1)], np.zeros((2, 1)), np.zeros((1, 1)))


def _h(p):
    p = np.asarray(p, dtype=float)
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def _matching_entropy_loops(model, tau, rho):
    """Direct loop over edges and nodes of the reweighted matching entropy."""
    rho = np.broadcast_to(np.asarray(rho, dtype=float), (model.n_rho,))
    ends = model.edge_nodes
    total = 0.0
    for k, (i, j) in enumerate(ends):
        t = tau[k]
        a = (1 - t) * np.log(1 - t) if t < 1 else 0.0
        b = t * np.log(t) if t > 0 else 0.0
        total += (rho[i] + rho[j] - 1) * a - b
    if not model.perfect:
        for v in range(model.n_rho):
            s = 1 - sum(tau[k] for k in range(len(ends)) if v in ends[k])
            total -= rho[v] * (s * np.log(s) if s > 0 else 0.0)
    return total


class TestEnergy:
    def test_zero_theta(self, small_bipartite, rng):
        assert energy(small_bipartite, rng.random(16), np.zeros(3)) == 0.0

    def test_point_mass_bipartite(self, rng):
        W = rng.normal(size=(4, 4))
        model = BipartiteMatching.indicator(4)
        perm = rng.permutation(4)
        expected = -sum(W[i, perm[i]] for i in range(4))
        np.testing.assert_allclose(energy(model, model.embed(perm), W.ravel()), expected,
                                   rtol=1e-14)

    def test_point_mass_general(self, rng):
        # half the trace of W Y in the symmetric adjacency convention
        F = rng.normal(size=(1, 4, 4))
        F = F + F.transpose(0, 2, 1)
        g = GeneralMatching.from_matrices(F)
        Y = np.zeros((4, 4))
        Y[0, 2] = Y[2, 0] = Y[1, 3] = Y[3, 1] = 1
        expected = -0.5 * np.trace(2.0 * F[0] @ Y)
        np.testing.assert_allclose(energy(g, g.embed([(0, 2), (1, 3)]), [2.0]), expected,
                                   rtol=1e-13)

    def test_double_sum(self, rng):
        F = rng.normal(size=(3, 4, 4))
        theta = rng.normal(size=3)
        tau = rng.random(16)
        expected = 0.0
        for k in range(3):
            for i in range(4):
                for j in range(4):
                    expected -= theta[k] * F[k, i, j] * tau[4 * i + j]
        np.testing.assert_allclose(energy(BipartiteMatching(F), tau, theta), expected, rtol=1e-12)


class TestGridEntropy:
    def test_single_node(self):
        g = PairwiseBinaryGrid(1, np.zeros((0, 2)), np.zeros((1, 1)), np.zeros((0, 1)))
        np.testing.assert_allclose(entropy(g, [0.5, 0.5]), LN2, rtol=1e-15)

    @pytest.mark.parametrize("rho", [1.0, 0.0, 0.3])
    def test_independent_edge(self, rho):
        g = _edge_model()
        np.testing.assert_allclose(entropy(g, g.init_pseudomarginals(), rho), 2 * LN2,
                                   rtol=1e-14)

    def test_correlated_edge_oracle(self):
        # rho = 1 on a single edge: exact entropy of the joint
        g = _edge_model()
        joint = np.array([[0.4, 0.1], [0.2, 0.3]])
        tau = g.join(np.stack([joint.sum(1), joint.sum(0)]), joint[None])
        np.testing.assert_allclose(entropy(g, tau, 1.0), _h(joint), rtol=1e-13)
        np.testing.assert_allclose(entropy(g, tau, 0.0),
                                   _h(joint.sum(1)) + _h(joint.sum(0)), rtol=1e-13)

    @pytest.mark.parametrize("seed", range(20))
    def test_forms_agree(self, seed):
        rng = np.random.default_rng(seed)
        g = random_lattice(rng)
        tau = random_interior(g, rng)
        rho = rng.random(g.n_edges)
        np.testing.assert_allclose(entropy_rw_grid(g, tau, rho),
                                   entropy_rw_grid_mutual_info(g, tau, rho), atol=1e-10)

    def test_negative_entries(self):
        g = _edge_model()
        tau = g.init_pseudomarginals()
        tau[0] = -0.1
        with pytest.raises(DomainError):
            entropy(g, tau)

    def test_tree_bethe_is_exact(self, rng):
        # on a tree with rho = 1 the entropy of the true marginals is the true entropy
        g = random_tree_grid(rng, 5)
        theta = rng.normal(size=g.n_features)
        Y = enumerate_structures(g)
        logp = Y @ g.scores(theta)
        p = np.exp(logp - logp.max())
        p /= p.sum()
        np.testing.assert_allclose(entropy(g, p @ Y, 1.0), _h(p), rtol=1e-10)


class TestMatchingEntropy:
    def test_two_by_two_bethe(self):
        assert abs(entropy_rw_matching(BipartiteMatching.indicator(2), np.full(4, 0.5), 1.0)) < 1e-15

    def test_two_by_two_half(self):
        np.testing.assert_allclose(
            entropy_rw_matching(BipartiteMatching.indicator(2), np.full(4, 0.5), 0.5), 2 * LN2,
            rtol=1e-15)

    @pytest.mark.parametrize("model", [BipartiteMatching.indicator(4),
                                       BipartiteMatching.indicator(3, perfect=False),
                                       GeneralMatching.from_matrices(np.ones((1, 6, 6)))],
                             ids=["bipartite", "imperfect", "general"])
    def test_vertices_have_zero_entropy(self, model, rng):
        for y in enumerate_structures(model)[:50]:
            assert entropy(model, y, rng.random(model.n_rho)) == 0.0

    @pytest.mark.parametrize("n", range(2, 9))
    def test_uniform_bethe_sign(self, n):
        model = BipartiteMatching.indicator(n)
        h = entropy(model, model.init_pseudomarginals(), 1.0)
        expected = n * n * ((1 - 1 / n) * np.log(1 - 1 / n) - np.log(1 / n) / n)
        np.testing.assert_allclose(h, expected, atol=1e-13)
        if n == 2:
            assert abs(h) < 1e-15
        else:
            assert h >= 0

    @pytest.mark.parametrize("seed", range(10))
    def test_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        model = BipartiteMatching.indicator(3, perfect=bool(seed % 2))
        tau = random_interior(model, rng)
        rho = rng.random(model.n_rho)
        np.testing.assert_allclose(entropy(model, tau, rho),
                                   _matching_entropy_loops(model, tau, rho), rtol=1e-12)

    def test_outside_unit_interval(self):
        tau = np.full(4, 0.5)
        tau[0] = 1.5
        with pytest.raises(DomainError):
            entropy(BipartiteMatching.indicator(2), tau)


class TestFreeEnergy:
    def test_uniform_bethe(self):
        v = free_energy(BipartiteMatching.indicator(2), np.full(4, 0.5), np.zeros(4), 1.0)
        assert v.energy == 0.0 and abs(v.total) < 1e-15

    def test_uniform_half(self):
        v = free_energy(BipartiteMatching.indicator(2), np.full(4, 0.5), np.zeros(4), 0.5)
        np.testing.assert_allclose(v.total, -2 * LN2, rtol=1e-15)
        assert v.total == v.energy - v.entropy

    @pytest.mark.parametrize("model", [BipartiteMatching(np.random.default_rng(0).normal(size=(2, 4, 4))),
                                       random_lattice(np.random.default_rng(1))],
                             ids=["bipartite", "grid"])
    def test_vertex_is_negated_score(self, model, rng):
        theta = rng.normal(size=model.n_features)
        for y in enumerate_structures(model)[:40]:
            np.testing.assert_allclose(free_energy(model, y, theta, rng.random()).total,
                                       -y @ model.scores(theta), atol=1e-12)


class TestGradients:
    @pytest.mark.parametrize("model", [BipartiteMatching.indicator(4),
                                       BipartiteMatching.indicator(3, perfect=False),
                                       GeneralMatching.from_matrices(np.ones((1, 6, 6))),
                                       GeneralMatching.from_matrices(np.ones((1, 4, 4)), perfect=False),
                                       random_lattice(np.random.default_rng(2))],
                             ids=["bipartite", "imperfect", "general", "general-imperfect", "grid"])
    def test_finite_differences(self, model, rng):
        rho = rng.random(model.n_rho)
        points = [random_interior(model, rng) for _ in range(20)]
        err = finite_difference_check(lambda t: float(entropy(model, t, rho)),
                                      lambda t: grad_entropy(model, t, rho), points,
                                      mask=model.free_mask)
        assert err < 1e-5

    def test_grid_uniform_symmetric(self, rng):
        g = random_lattice(rng)
        node, _ = g.split(grad_entropy(g, g.init_pseudomarginals(), 1.0))
        np.testing.assert_allclose(node[:, 0], node[:, 1], rtol=1e-15)

    def test_matching_uniform_symmetric(self):
        m = BipartiteMatching.indicator(5)
        g = grad_entropy(m, m.init_pseudomarginals(), 0.7)
        np.testing.assert_allclose(g, g[0], rtol=1e-14)

    @pytest.mark.parametrize("value", [0.0, 1.0])
    def test_boundary(self, value):
        tau = np.full(4, 0.5)
        tau[[0, 3]] = value
        tau[[1, 2]] = 1 - value
        with pytest.raises(GradientUndefinedError):
            grad_entropy(BipartiteMatching.indicator(2), tau)

    def test_clamped_coordinates_zero(self, rng):
        g = GeneralMatching(4, [(0, 1), (1, 2), (2, 3)], np.ones((1, 3)))
        grad = grad_entropy(g, g.init_pseudomarginals(), 1.0)
        np.testing.assert_array_equal(grad, 0.0)


def _rand_matching_point(model, seed):
    return random_interior(model, np.random.default_rng(seed))


class TestConvexity:
    """Midpoint convexity of F_rho on T' for counting numbers in [0, 1]."""

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), n=st.integers(2, 5), perfect=st.booleans())
    def test_midpoint_bipartite(self, seed, n, perfect):
        rng = np.random.default_rng(seed)
        model = BipartiteMatching(rng.normal(size=(2, n, n)), perfect=perfect)
        theta = rng.normal(size=2)
        rho = rng.random(model.n_rho)
        a, b = random_interior(model, rng), random_interior(model, rng)
        f = lambda t: float(free_energy_value(model, t, theta, rho))  # noqa: E731
        assert f(0.5 * (a + b)) <= 0.5 * (f(a) + f(b)) + 1e-10

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_midpoint_with_vertices(self, seed):
        # endpoints on the boundary of T' (matchings with empty rows included)
        rng = np.random.default_rng(seed)
        model = BipartiteMatching.indicator(3, perfect=False)
        Y = enumerate_structures(model)
        a = Y[rng.integers(len(Y))]
        b = random_interior(model, rng)
        rho = rng.random(model.n_rho)
        theta = rng.normal(size=model.n_features)
        f = lambda t: float(free_energy_value(model, t, theta, rho))  # noqa: E731
        assert f(0.5 * (a + b)) <= 0.5 * (f(a) + f(b)) + 1e-10


class TestXlogx:
    def test_zero(self):
        np.testing.assert_array_equal(xlogx([0.0, 1.0]), [0.0, 0.0])

    def test_negative(self):
        with pytest.raises(DomainError):
            xlogx([-0.5])
