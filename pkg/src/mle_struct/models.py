"""Structured models, their feature maps and local polytopes.

Every model flattens its pseudomarginals into a single coordinate vector
``tau`` of length ``model.dim``:

* ``BipartiteMatching`` -- one scalar per edge ``(i, j)`` of the complete
  bipartite graph, row-major (``tau[i * n + j]``).
* ``GeneralMatching`` -- one scalar per edge, in the order of ``model.edges``
  (lexicographically sorted pairs ``i < j``).
* ``PairwiseBinaryGrid`` -- the overcomplete parameterization: ``2 * N`` node
  entries (``tau[2 * n + label]``) followed by ``4 * E`` edge entries
  (``tau[2 * N + 4 * e + 2 * a + b]`` for the joint state ``(a, b)``).

Scores are linear in ``tau``: the score of a structure ``y`` (embedded as a
0/1 vector) under parameters ``theta`` is ``y @ model.feature_matrix @ theta``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .exceptions import InfeasibleModelError, SizeLimitError, StructureError

BIPARTITE = "bipartite_matching"
GENERAL = "general_matching"
GRID = "pairwise_binary_grid"

#: largest graph accepted by the exhaustive general-matching routines
MAX_GENERAL_NODES = 16


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


class StructuredModel:
    """Common interface; see the concrete subclasses."""

    kind: str

    @property
    def dim(self) -> int:
        raise NotImplementedError

    @property
    def n_features(self) -> int:
        raise NotImplementedError

    @property
    def n_rho(self) -> int:
        """Length of the reweighting vector (nodes for matchings, edges for grids)."""
        raise NotImplementedError

    @cached_property
    def feature_matrix(self) -> np.ndarray:
        """Dense ``(dim, K)`` map from parameters to coordinate scores."""
        return _frozen(self._build_feature_matrix())

    def _build_feature_matrix(self):
        raise NotImplementedError

    @property
    def free_mask(self) -> np.ndarray:
        """Coordinates that are not structurally clamped."""
        return np.ones(self.dim, dtype=bool)

    def topology_key(self):
        raise NotImplementedError

    def scores(self, theta) -> np.ndarray:
        """Per-coordinate scores ``feature_matrix @ theta``."""
        theta = self.check_theta(theta)
        return self.feature_matrix @ theta

    def feature_expectation(self, tau) -> np.ndarray:
        """Expected sufficient statistics ``feature_matrix.T @ tau``."""
        tau = self.check_tau(tau)
        return tau @ self.feature_matrix

    def check_theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_features,):
            raise StructureError(
                f"theta has shape {theta.shape}, expected ({self.n_features},)")
        return theta

    def check_tau(self, tau) -> np.ndarray:
        tau = np.asarray(tau, dtype=float)
        if tau.shape[-1:] != (self.dim,):
            raise StructureError(
                f"pseudomarginals have trailing dimension {tau.shape[-1:]}, "
                f"expected {self.dim}")
        return tau

    def default_rho(self) -> float:
        raise NotImplementedError

    def rho_vector(self, rho=None) -> np.ndarray:
        """Broadcast a scalar or validate a per-node / per-edge reweighting vector."""
        if rho is None:
            rho = self.default_rho()
        r = np.broadcast_to(np.asarray(rho, dtype=float), (self.n_rho,)).copy() \
            if np.ndim(rho) == 0 else np.asarray(rho, dtype=float)
        if r.shape != (self.n_rho,):
            raise StructureError(f"rho has shape {r.shape}, expected ({self.n_rho},)")
        if np.any(r < 0) or np.any(r > 1) or not np.all(np.isfinite(r)):
            raise StructureError("reweighting parameters must lie in [0, 1]")
        return r

    def init_pseudomarginals(self) -> np.ndarray:
        raise NotImplementedError

    def validate(self, tau, tol: float = 1e-9) -> bool:
        raise NotImplementedError

    def embed(self, observation) -> np.ndarray:
        """0/1 coordinate vector of an observed structure."""
        raise NotImplementedError

    def decode(self, vertex):
        """Inverse of :meth:`embed` for integral vertices."""
        raise NotImplementedError

    def hamming(self, a, b) -> float:
        """Fraction of nodes whose assignment differs between two structures."""
        raise NotImplementedError

    def is_vertex(self, y, tol: float = 1e-12) -> bool:
        y = np.asarray(y, dtype=float)
        integral = np.all(np.minimum(np.abs(y), np.abs(y - 1)) <= tol)
        return bool(integral and self.validate(y, tol))


# --------------------------------------------------------------------------
# matchings
# --------------------------------------------------------------------------

class BipartiteMatching(StructuredModel):
    """Log-linear distribution over matchings of a complete ``n x n`` bipartite graph.

    Parameters
    ----------
    features : array_like, shape (K, n, n)
        Feature matrices ``F^k``; the edge weight is ``W = sum_k theta_k F^k``.
    perfect : bool
        Restrict to perfect matchings (permutations). Imperfect matchings
        carry an explicit slack per node.
    """

    kind = BIPARTITE

    def __init__(self, features, perfect: bool = True):
        f = np.asarray(features, dtype=float)
        if f.ndim != 3 or f.shape[1] != f.shape[2]:
            raise StructureError(f"features must have shape (K, n, n), got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise StructureError("features must be finite")
        self.features = _frozen(f)
        self.n = f.shape[1]
        self.perfect = bool(perfect)

    @classmethod
    def indicator(cls, n: int, perfect: bool = True):
        """One indicator feature per edge, so that ``theta`` is ``W`` itself."""
        return cls(np.eye(n * n).reshape(n * n, n, n), perfect=perfect)

    @property
    def dim(self):
        return self.n * self.n

    @property
    def n_features(self):
        return self.features.shape[0]

    @property
    def n_rho(self):
        return 2 * self.n

    def default_rho(self):
        return 1.0

    def topology_key(self):
        return (self.kind, self.n, self.perfect, self.n_features)

    def _build_feature_matrix(self):
        return self.features.reshape(self.n_features, -1).T

    @property
    def edge_nodes(self):
        """``(dim, 2)`` node indices per coordinate; columns are nodes ``n..2n-1``."""
        i, j = np.divmod(np.arange(self.dim), self.n)
        return np.stack([i, j + self.n], axis=1)

    def init_pseudomarginals(self):
        value = 1.0 / self.n if self.perfect else 1.0 / (self.n + 1)
        return np.full(self.dim, value)

    def validate(self, tau, tol=1e-9):
        tau = self.check_tau(tau)
        if tau.ndim != 1:
            raise StructureError("validate expects a single pseudomarginal vector")
        T = tau.reshape(self.n, self.n)
        if np.any(T < -tol) or np.any(T > 1 + tol):
            return False
        rows, cols = T.sum(1), T.sum(0)
        if self.perfect:
            return bool(np.all(np.abs(rows - 1) <= tol) and np.all(np.abs(cols - 1) <= tol))
        return bool(np.all(rows <= 1 + tol) and np.all(cols <= 1 + tol))

    def embed(self, observation):
        perm = np.asarray(observation, dtype=int)
        if perm.shape != (self.n,):
            raise StructureError(f"matching must have length {self.n}")
        matched = perm[perm >= 0]
        if np.any(perm >= self.n) or np.any(perm < -1) or len(set(matched)) != len(matched):
            raise StructureError(f"{perm.tolist()} is not a valid matching")
        if self.perfect and len(matched) != self.n:
            raise StructureError(f"{perm.tolist()} is not a perfect matching")
        Y = np.zeros((self.n, self.n))
        rows = np.flatnonzero(perm >= 0)
        Y[rows, perm[rows]] = 1.0
        return Y.ravel()

    def decode(self, vertex):
        Y = np.asarray(vertex, dtype=float).reshape(self.n, self.n)
        perm = np.full(self.n, -1, dtype=int)
        i, j = np.nonzero(Y > 0.5)
        perm[i] = j
        return perm

    def hamming(self, a, b):
        return float(np.mean(np.asarray(a) != np.asarray(b)))


class GeneralMatching(StructuredModel):
    """Log-linear distribution over matchings of a general (non-bipartite) graph.

    ``features`` has shape ``(K, E)``: one value per feature and edge, with
    edges listed in ``edges`` order. Use :meth:`from_matrices` to build it from
    symmetric ``|V| x |V|`` feature matrices.
    """

    kind = GENERAL

    def __init__(self, n_nodes: int, edges, features, perfect: bool = True):
        n_nodes = int(n_nodes)
        if n_nodes > MAX_GENERAL_NODES:
            raise SizeLimitError(
                f"general matchings are limited to {MAX_GENERAL_NODES} nodes, got {n_nodes}")
        e = np.asarray(edges, dtype=int).reshape(-1, 2)
        if np.any(e < 0) or np.any(e >= n_nodes) or np.any(e[:, 0] == e[:, 1]):
            raise StructureError("every edge must join two distinct existing nodes")
        e = np.sort(e, axis=1)
        order = np.lexsort((e[:, 1], e[:, 0]))
        if len({tuple(p) for p in e}) != len(e):
            raise StructureError("duplicate edges")
        f = np.asarray(features, dtype=float)
        if f.ndim != 2 or f.shape[1] != len(e):
            raise StructureError(f"features must have shape (K, {len(e)}), got {f.shape}")
        if perfect and n_nodes % 2:
            raise StructureError("perfect matchings need an even number of nodes")
        self.n_nodes = n_nodes
        self.edges = _frozen(e[order], dtype=int)
        self.features = _frozen(f[:, order])
        self.perfect = bool(perfect)
        self._edge_index = {tuple(p): k for k, p in enumerate(self.edges.tolist())}

    @classmethod
    def from_matrices(cls, matrices, adjacency=None, perfect: bool = True):
        """Build from ``(K, n, n)`` symmetric feature matrices.

        Edges default to every pair ``i < j`` (complete graph) unless a boolean
        ``adjacency`` matrix is given.
        """
        F = np.asarray(matrices, dtype=float)
        if F.ndim != 3 or F.shape[1] != F.shape[2]:
            raise StructureError(f"feature matrices must have shape (K, n, n), got {F.shape}")
        if not np.allclose(F, F.transpose(0, 2, 1)):
            raise StructureError("feature matrices must be symmetric")
        n = F.shape[1]
        if adjacency is None:
            adjacency = ~np.eye(n, dtype=bool)
        iu, ju = np.nonzero(np.triu(np.asarray(adjacency, dtype=bool), 1))
        return cls(n, np.stack([iu, ju], 1), F[:, iu, ju], perfect=perfect)

    @property
    def dim(self):
        return len(self.edges)

    @property
    def n_features(self):
        return self.features.shape[0]

    @property
    def n_rho(self):
        return self.n_nodes

    @property
    def edge_nodes(self):
        return self.edges

    def default_rho(self):
        return 1.0

    def topology_key(self):
        return (self.kind, self.n_nodes, tuple(map(tuple, self.edges.tolist())),
                self.perfect, self.n_features)

    def _build_feature_matrix(self):
        return self.features.T

    def edge_index(self, i, j) -> int:
        return self._edge_index[(min(i, j), max(i, j))]

    @cached_property
    def clamps(self):
        """``(forced, forbidden)`` edge index sets; see :func:`clamp_analysis`."""
        return clamp_analysis(self)

    @property
    def free_mask(self):
        if not self.perfect:
            return np.ones(self.dim, dtype=bool)
        forced, forbidden = self.clamps
        mask = np.ones(self.dim, dtype=bool)
        mask[list(forced | forbidden)] = False
        return mask

    def init_pseudomarginals(self):
        if not self.perfect:
            deg = np.bincount(self.edges.ravel(), minlength=self.n_nodes)
            return np.full(self.dim, 1.0 / (deg.max(initial=0) + 1))
        from .map_solvers import perfect_matching_with

        forced, forbidden = self.clamps
        found = set()
        for k in range(self.dim):
            if k in forced or k in forbidden:
                continue
            for include in (True, False):
                m = perfect_matching_with(self, k, include)
                found.add(tuple(sorted(m)))
        if not found:
            # every edge is clamped: the graph has a unique perfect matching
            m = perfect_matching_with(self, None, True)
            found.add(tuple(sorted(m)))
        tau = np.zeros(self.dim)
        for m in sorted(found):
            tau[list(m)] += 1.0
        return tau / len(found)

    def degree_sums(self, tau):
        tau = np.asarray(tau, dtype=float)
        s = np.zeros(tau.shape[:-1] + (self.n_nodes,))
        np.add.at(s, (..., self.edges[:, 0]), tau)
        np.add.at(s, (..., self.edges[:, 1]), tau)
        return s

    def validate(self, tau, tol=1e-9):
        tau = self.check_tau(tau)
        if tau.ndim != 1:
            raise StructureError("validate expects a single pseudomarginal vector")
        if np.any(tau < -tol) or np.any(tau > 1 + tol):
            return False
        s = self.degree_sums(tau)
        if self.perfect:
            return bool(np.all(np.abs(s - 1) <= tol))
        return bool(np.all(s <= 1 + tol))

    def embed(self, observation):
        y = np.zeros(self.dim)
        seen = set()
        for i, j in observation:
            key = (min(int(i), int(j)), max(int(i), int(j)))
            if key not in self._edge_index:
                raise StructureError(f"{key} is not an edge of the graph")
            if key[0] in seen or key[1] in seen:
                raise StructureError(f"node reused in matching {observation}")
            seen.update(key)
            y[self._edge_index[key]] = 1.0
        if self.perfect and len(seen) != self.n_nodes:
            raise StructureError("observation is not a perfect matching")
        return y

    def decode(self, vertex):
        idx = np.flatnonzero(np.asarray(vertex) > 0.5)
        return [tuple(int(v) for v in self.edges[k]) for k in idx]

    def partners(self, matching):
        p = np.full(self.n_nodes, -1)
        for i, j in matching:
            p[i], p[j] = j, i
        return p

    def hamming(self, a, b):
        return float(np.mean(self.partners(a) != self.partners(b)))


def edge_weight_matrix(model: StructuredModel, theta) -> np.ndarray:
    """Weighted adjacency ``W = sum_k theta_k F^k`` of a matching model.

    Bipartite models return the ``n x n`` biadjacency; general models return the
    symmetric ``|V| x |V|`` adjacency with zeros off the edge set.
    """
    if isinstance(model, BipartiteMatching):
        theta = model.check_theta(theta)
        return np.tensordot(theta, model.features, axes=1)
    if isinstance(model, GeneralMatching):
        w = model.scores(theta)
        W = np.zeros((model.n_nodes, model.n_nodes))
        W[model.edges[:, 0], model.edges[:, 1]] = w
        W[model.edges[:, 1], model.edges[:, 0]] = w
        return W
    raise StructureError(f"edge weights are only defined for matchings, not {model.kind}")


def clamp_analysis(model: GeneralMatching):
    """Edges present in every / no perfect matching.

    One feasibility matching is solved per edge: an edge is forbidden when the
    graph without its endpoints has no perfect matching, and forced when the
    graph without the edge itself has none. Returns ``(forced, forbidden)`` as
    sets of edge indices.

    Raises :class:`InfeasibleModelError` when the graph has no perfect matching
    at all (disconnected odd components included).
    """
    from .map_solvers import has_perfect_matching

    if isinstance(model, BipartiteMatching):
        # complete bipartite graphs: every edge lies in some permutation
        return set(), set()
    if not isinstance(model, GeneralMatching):
        raise StructureError("clamp analysis applies to matching models only")
    if model.dim == 0 and model.n_nodes == 0:
        return set(), set()
    all_nodes = (1 << model.n_nodes) - 1
    adj = _adjacency_masks(model)
    if not has_perfect_matching(adj, all_nodes):
        raise InfeasibleModelError("graph has no perfect matching")
    forced, forbidden = set(), set()
    for k, (i, j) in enumerate(model.edges.tolist()):
        rest = all_nodes & ~(1 << i) & ~(1 << j)
        if not has_perfect_matching(adj, rest):
            forbidden.add(k)
            continue
        without = list(adj)
        without[i] &= ~(1 << j)
        without[j] &= ~(1 << i)
        if not has_perfect_matching(tuple(without), all_nodes):
            forced.add(k)
    return forced, forbidden


def _adjacency_masks(model: GeneralMatching):
    adj = [0] * model.n_nodes
    for i, j in model.edges.tolist():
        adj[i] |= 1 << j
        adj[j] |= 1 << i
    return tuple(adj)


# --------------------------------------------------------------------------
# pairwise binary grids
# --------------------------------------------------------------------------

class PairwiseBinaryGrid(StructuredModel):
    """Pairwise binary CRF with linear node and edge parameter maps.

    Node potentials are ``F @ u_n`` (``F`` is ``2 x C``) and edge potentials
    ``G @ v_e`` (``G`` is ``4 x D``, rows indexed by the joint state
    ``2 * a + b``). ``theta`` is ``concat(F.ravel(), G.ravel())``.
    """

    kind = GRID

    def __init__(self, n_nodes: int, edges, node_features, edge_features, shape=None):
        n_nodes = int(n_nodes)
        e = np.asarray(edges, dtype=int).reshape(-1, 2)
        if np.any(e < 0) or np.any(e >= n_nodes) or np.any(e[:, 0] == e[:, 1]):
            raise StructureError("every edge must join two distinct existing nodes")
        u = np.asarray(node_features, dtype=float)
        v = np.asarray(edge_features, dtype=float)
        if u.ndim != 2 or u.shape[0] != n_nodes:
            raise StructureError(f"node features must have shape ({n_nodes}, C), got {u.shape}")
        if v.ndim != 2 or v.shape[0] != len(e):
            raise StructureError(f"edge features must have shape ({len(e)}, D), got {v.shape}")
        self.n_nodes = n_nodes
        self.edges = _frozen(e, dtype=int)
        self.node_features = _frozen(u)
        self.edge_features = _frozen(v)
        self.shape = tuple(shape) if shape is not None else None

    @classmethod
    def lattice(cls, height: int, width: int, node_features, edge_features=None):
        """4-connected ``height x width`` grid; nodes are numbered row-major."""
        edges = lattice_edges(height, width)
        if edge_features is None:
            edge_features = np.ones((len(edges), 1))
        return cls(height * width, edges, node_features, edge_features, shape=(height, width))

    @property
    def C(self):
        return self.node_features.shape[1]

    @property
    def D(self):
        return self.edge_features.shape[1]

    @property
    def n_edges(self):
        return len(self.edges)

    @property
    def dim(self):
        return 2 * self.n_nodes + 4 * self.n_edges

    @property
    def n_features(self):
        return 2 * self.C + 4 * self.D

    @property
    def n_rho(self):
        return self.n_edges

    @property
    def n_node_coords(self):
        return 2 * self.n_nodes

    def default_rho(self):
        return 0.5

    def topology_key(self):
        return (self.kind, self.n_nodes, tuple(map(tuple, self.edges.tolist())), self.C, self.D)

    def split_theta(self, theta):
        theta = self.check_theta(theta)
        return theta[:2 * self.C].reshape(2, self.C), theta[2 * self.C:].reshape(4, self.D)

    def split(self, tau):
        """Views ``(node (..., N, 2), edge (..., E, 2, 2))`` of a coordinate array."""
        tau = np.asarray(tau)
        lead = tau.shape[:-1]
        node = tau[..., :2 * self.n_nodes].reshape(lead + (self.n_nodes, 2))
        edge = tau[..., 2 * self.n_nodes:].reshape(lead + (self.n_edges, 2, 2))
        return node, edge

    def join(self, node, edge):
        node, edge = np.asarray(node, dtype=float), np.asarray(edge, dtype=float)
        lead = node.shape[:-2]
        return np.concatenate([node.reshape(lead + (-1,)), edge.reshape(lead + (-1,))], axis=-1)

    def _build_feature_matrix(self):
        N, E, C, D = self.n_nodes, self.n_edges, self.C, self.D
        phi = np.zeros((self.dim, self.n_features))
        for label in range(2):
            phi[2 * np.arange(N) + label, label * C:(label + 1) * C] = self.node_features
        for s in range(4):
            phi[2 * N + 4 * np.arange(E) + s, 2 * C + s * D:2 * C + (s + 1) * D] = self.edge_features
        return phi

    def potentials(self, theta):
        """Node ``(N, 2)`` and edge ``(E, 2, 2)`` log-potentials."""
        F, G = self.split_theta(theta)
        return self.node_features @ F.T, (self.edge_features @ G.T).reshape(-1, 2, 2)

    def init_pseudomarginals(self):
        return self.join(np.full((self.n_nodes, 2), 0.5), np.full((self.n_edges, 2, 2), 0.25))

    def validate(self, tau, tol=1e-9):
        tau = self.check_tau(tau)
        if tau.ndim != 1:
            raise StructureError("validate expects a single pseudomarginal vector")
        if np.any(tau < -tol) or np.any(tau > 1 + tol):
            return False
        node, edge = self.split(tau)
        if np.any(np.abs(node.sum(1) - 1) > tol):
            return False
        if self.n_edges:
            i, j = self.edges[:, 0], self.edges[:, 1]
            if np.any(np.abs(edge.sum(2) - node[i]) > tol):
                return False
            if np.any(np.abs(edge.sum(1) - node[j]) > tol):
                return False
        return True

    def embed(self, observation):
        y = np.asarray(observation)
        if y.shape != (self.n_nodes,) or not np.all((y == 0) | (y == 1)):
            raise StructureError(f"labelling must be a 0/1 vector of length {self.n_nodes}")
        y = y.astype(int)
        node = np.eye(2)[y]
        edge = np.zeros((self.n_edges, 2, 2))
        edge[np.arange(self.n_edges), y[self.edges[:, 0]], y[self.edges[:, 1]]] = 1.0
        return self.join(node, edge)

    def decode(self, vertex):
        node, _ = self.split(np.asarray(vertex, dtype=float))
        return (node[:, 1] > node[:, 0]).astype(int)

    def hamming(self, a, b):
        return float(np.mean(np.asarray(a) != np.asarray(b)))


def lattice_edges(height: int, width: int) -> np.ndarray:
    edges = []
    for r in range(height):
        for c in range(width):
            k = r * width + c
            if c + 1 < width:
                edges.append((k, k + 1))
            if r + 1 < height:
                edges.append((k, k + width))
    return np.array(sorted(edges), dtype=int).reshape(-1, 2)


# --------------------------------------------------------------------------
# operations and datasets
# --------------------------------------------------------------------------

def validate_local_polytope(tau, model: StructuredModel, tol: float = 1e-9) -> bool:
    """True iff ``tau`` satisfies every polytope constraint of ``model`` within ``tol``."""
    return model.validate(tau, tol)


def init_pseudomarginals(model: StructuredModel) -> np.ndarray:
    """Strictly interior starting point (except on clamped coordinates)."""
    return model.init_pseudomarginals()


@dataclass(frozen=True)
class Dataset:
    """``M`` observed structures, each with its own feature maps.

    All samples share one topology. ``observations[m]`` is the 0/1 embedding of
    the observed structure of sample ``m``; ``raw`` keeps the native form
    (permutation, edge list or labelling) for serialization.
    """

    models: tuple
    observations: np.ndarray
    raw: tuple = field(default=(), compare=False)

    @classmethod
    def from_observations(cls, models: Sequence[StructuredModel], observations):
        models = tuple(models)
        observations = list(observations)
        if len(models) != len(observations):
            raise StructureError("need exactly one observation per sample")
        if models:
            key = models[0].topology_key()
            for m in models[1:]:
                if m.topology_key() != key:
                    raise StructureError("all samples must share one topology")
        Y = np.array([mdl.embed(obs) for mdl, obs in zip(models, observations)], dtype=float)
        if not models:
            Y = np.zeros((0, 0))
        Y.setflags(write=False)
        return cls(models, Y, tuple(observations))

    @classmethod
    def shared(cls, model: StructuredModel, observations):
        """Every sample uses the same feature maps (a generative model)."""
        observations = list(observations)
        return cls.from_observations([model] * len(observations), observations)

    def __len__(self):
        return len(self.models)

    @property
    def M(self):
        return len(self.models)

    @property
    def model(self) -> StructuredModel:
        return self.models[0]

    @cached_property
    def feature_tensor(self) -> np.ndarray:
        """``(M, dim, K)`` stacked feature matrices."""
        return np.stack([m.feature_matrix for m in self.models])

    @cached_property
    def shared_features(self) -> np.ndarray | None:
        """The common ``(dim, K)`` feature matrix if every sample uses one model."""
        if self.models and all(m is self.models[0] for m in self.models):
            return self.models[0].feature_matrix
        return None

    def pullback(self, tau_all) -> np.ndarray:
        """``sum_m Phi_m^T tau_m`` for an ``(M, dim)`` array."""
        F = self.shared_features
        if F is not None:
            return np.asarray(tau_all).sum(axis=0) @ F
        return np.einsum("md,mdk->k", tau_all, self.feature_tensor)

    def pushforward(self, vec) -> np.ndarray:
        """``Phi_m vec`` for every sample, shape ``(M, dim)``."""
        F = self.shared_features
        if F is not None:
            return np.broadcast_to(F @ vec, (self.M, F.shape[0]))
        return np.einsum("mdk,k->md", self.feature_tensor, vec)

    @cached_property
    def empirical_features(self) -> np.ndarray:
        """``sum_m phi(X_m, Y_m)``."""
        return self.pullback(self.observations)

    def subset(self, index):
        index = list(index)
        return Dataset.from_observations([self.models[i] for i in index],
                                         [self.raw[i] for i in index])


def enumerate_structures(model: StructuredModel, limit: int = 1 << 20):
    """All integral vertices of the structure set, as 0/1 rows.

    Exhaustive; intended for verification at desk scale.
    """
    if isinstance(model, BipartiteMatching):
        if model.perfect:
            if model.n > 8:
                raise SizeLimitError("enumeration of permutations is capped at n = 8")
            perms = list(itertools.permutations(range(model.n)))
            return np.array([model.embed(p) for p in perms])
        if model.n > 6:
            raise SizeLimitError("enumeration of imperfect matchings is capped at n = 6")
        out = []
        for perm in itertools.product(range(-1, model.n), repeat=model.n):
            m = [p for p in perm if p >= 0]
            if len(set(m)) == len(m):
                out.append(model.embed(perm))
        return np.array(out)
    if isinstance(model, GeneralMatching):
        out = []
        for m in _general_matchings(model, perfect=model.perfect):
            y = np.zeros(model.dim)
            y[list(m)] = 1.0
            out.append(y)
            if len(out) > limit:
                raise SizeLimitError("too many matchings to enumerate")
        if not out:
            raise InfeasibleModelError("graph has no perfect matching")
        return np.array(out)
    if isinstance(model, PairwiseBinaryGrid):
        if 2 ** model.n_nodes > limit:
            raise SizeLimitError(f"{2 ** model.n_nodes} labellings exceed the cap {limit}")
        labels = all_labellings(model.n_nodes)
        return embed_labellings(model, labels)
    raise StructureError(f"unknown model {model!r}")


def all_labellings(n: int) -> np.ndarray:
    return ((np.arange(2 ** n)[:, None] >> np.arange(n)[::-1]) & 1).astype(int)


def embed_labellings(model: PairwiseBinaryGrid, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    node = np.eye(2)[labels]
    i, j = model.edges[:, 0], model.edges[:, 1]
    edge = np.zeros(labels.shape[:1] + (model.n_edges, 4))
    if model.n_edges:
        state = 2 * labels[:, i] + labels[:, j]
        np.put_along_axis(edge, state[..., None], 1.0, axis=2)
    return np.concatenate([node.reshape(len(labels), -1), edge.reshape(len(labels), -1)], 1)


def _general_matchings(model: GeneralMatching, perfect: bool):
    nbrs = {v: [] for v in range(model.n_nodes)}
    for k, (i, j) in enumerate(model.edges.tolist()):
        nbrs[i].append((j, k))
        nbrs[j].append((i, k))

    def rec(free, chosen):
        if not free:
            yield tuple(chosen)
            return
        v = min(free)
        rest = free - {v}
        if not perfect:
            yield from rec(rest, chosen)
        for u, k in nbrs[v]:
            if u in rest:
                yield from rec(rest - {u}, chosen + [k])

    yield from rec(frozenset(range(model.n_nodes)), [])
