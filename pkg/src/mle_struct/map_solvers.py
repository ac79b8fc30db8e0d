"""Exact linear-minimization oracles over structure polytopes.

Every oracle used by Frank-Wolfe goes through :func:`linear_minimizer`, which
*minimizes* ``<vertex, cost>``; callers that want a MAP decode pass the negated
scores. Ties are broken deterministically (lexicographically first structure).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import linear_sum_assignment

from .exceptions import InfeasibleModelError, SizeLimitError, StructureError
from .models import (MAX_GENERAL_NODES, BipartiteMatching, GeneralMatching,
                     PairwiseBinaryGrid, StructuredModel, _adjacency_masks,
                     all_labellings, enumerate_structures)


@dataclass
class VertexSolution:
    """Result of a MAP / linear-minimization call.

    ``structure`` is the native form (permutation, edge-index list, or
    ``(node, edge)`` marginal arrays for the binary LP); ``vertex`` is the flat
    coordinate vector when a model was supplied.
    """

    structure: object
    objective: float
    exact: bool = True
    vertex: np.ndarray | None = None


# --------------------------------------------------------------------------
# bipartite assignment
# --------------------------------------------------------------------------

def solve_bipartite_matching(cost, maximize: bool = False, perfect: bool = True) -> VertexSolution:
    """Optimal assignment for a square weight matrix.

    Backed by the Jonker-Volgenant shortest augmenting path solver. With
    ``perfect=False`` the best (not necessarily perfect) matching is returned;
    unmatched rows get ``-1`` in the permutation.
    """
    C = np.asarray(cost, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise StructureError(f"cost must be a square matrix, got shape {C.shape}")
    if not np.all(np.isfinite(C)):
        raise StructureError("cost matrix has non-finite entries")
    n = C.shape[0]
    work = -C if maximize else C
    if not perfect:
        work = np.minimum(work, 0.0)
    rows, cols = linear_sum_assignment(work)
    perm = np.full(n, -1, dtype=int)
    perm[rows] = cols
    if not perfect:
        perm[work[rows, cols] >= 0] = -1
    matched = np.flatnonzero(perm >= 0)
    return VertexSolution(perm, float(C[matched, perm[matched]].sum()))


# --------------------------------------------------------------------------
# general matchings (subset dynamic programming)
# --------------------------------------------------------------------------

@lru_cache(maxsize=1 << 16)
def has_perfect_matching(adj: tuple, mask: int) -> bool:
    """Whether the node subset ``mask`` has a perfect matching in ``adj``."""
    if mask == 0:
        return True
    v = (mask & -mask).bit_length() - 1
    rest = mask & ~(1 << v)
    cand = adj[v] & rest
    while cand:
        b = cand & -cand
        if has_perfect_matching(adj, rest & ~b):
            return True
        cand ^= b
    return False


def _best_matching(n_nodes, edges, weights, perfect=True):
    """Maximum-weight (perfect) matching by memoized recursion on node subsets.

    The lowest free node is matched first, to partners in increasing order, and
    strictly better values replace the incumbent, which yields the
    lexicographically first optimal matching.
    """
    nbrs = [[] for _ in range(n_nodes)]
    for k, (i, j) in enumerate(edges):
        nbrs[i].append((j, k))
        nbrs[j].append((i, k))
    for lst in nbrs:
        lst.sort()
    w = [float(x) for x in weights]
    NEG = float("-inf")

    @lru_cache(maxsize=None)
    def best(mask):
        if mask == 0:
            return 0.0, None
        v = (mask & -mask).bit_length() - 1
        rest = mask & ~(1 << v)
        top, arg = NEG, None
        for u, k in nbrs[v]:
            if rest >> u & 1:
                val, _ = best(rest & ~(1 << u))
                if val != NEG and val + w[k] > top:
                    top, arg = val + w[k], (k, rest & ~(1 << u))
        if not perfect:
            val, _ = best(rest)
            if val > top:
                top, arg = val, (None, rest)
        return top, arg

    full = (1 << n_nodes) - 1
    value, _ = best(full)
    if value == NEG:
        raise InfeasibleModelError("graph has no perfect matching")
    chosen, mask = [], full
    while mask:
        _, (k, mask) = best(mask)
        if k is not None:
            chosen.append(k)
    return value, sorted(chosen)


def solve_general_perfect_matching(weights, graph: GeneralMatching, perfect=None) -> VertexSolution:
    """Maximum-weight perfect matching on a graph with at most 16 nodes.

    ``weights`` holds one value per edge of ``graph`` (in ``graph.edges`` order).
    The structure is the sorted list of chosen edge indices.
    """
    if graph.n_nodes > MAX_GENERAL_NODES:
        raise SizeLimitError(f"general matching is capped at {MAX_GENERAL_NODES} nodes")
    w = np.asarray(weights, dtype=float)
    if w.shape != (graph.dim,):
        raise StructureError(f"weights must have shape ({graph.dim},)")
    if not np.all(np.isfinite(w)):
        raise StructureError("weights must be finite")
    perfect = graph.perfect if perfect is None else perfect
    value, chosen = _best_matching(graph.n_nodes, graph.edges.tolist(), w, perfect)
    y = np.zeros(graph.dim)
    y[chosen] = 1.0
    return VertexSolution(chosen, value, vertex=y)


def perfect_matching_with(graph: GeneralMatching, edge, include: bool):
    """Some perfect matching that contains (or avoids) edge index ``edge``.

    Used to build the interior starting point; returns edge indices.
    """
    if edge is None:
        return _best_matching(graph.n_nodes, graph.edges.tolist(), np.zeros(graph.dim))[1]
    # a large bonus/penalty forces the edge in/out while zero elsewhere keeps
    # the lexicographic tie-break
    w = np.zeros(graph.dim)
    w[edge] = 1.0 if include else -float(graph.n_nodes + 1)
    value, chosen = _best_matching(graph.n_nodes, graph.edges.tolist(), w)
    if (edge in chosen) != include:
        raise InfeasibleModelError(f"no perfect matching {'with' if include else 'without'} edge {edge}")
    return chosen


# --------------------------------------------------------------------------
# binary pairwise local-polytope LP via roof duality
# --------------------------------------------------------------------------

class _MaxFlow:
    """Edmonds-Karp (shortest augmenting paths) on a small float-capacity network."""

    def __init__(self, n):
        self.n = n
        self.head = [[] for _ in range(n)]
        self.to, self.cap = [], []

    def add_edge(self, u, v, c):
        if c <= 0:
            return
        self.head[u].append(len(self.to))
        self.to.append(v)
        self.cap.append(float(c))
        self.head[v].append(len(self.to))
        self.to.append(u)
        self.cap.append(0.0)

    def run(self, s, t, eps):
        flow = 0.0
        while True:
            parent = [-1] * self.n
            parent[s] = -2
            q = deque([s])
            while q and parent[t] == -1:
                u = q.popleft()
                for a in self.head[u]:
                    v = self.to[a]
                    if parent[v] == -1 and self.cap[a] > eps:
                        parent[v] = a
                        q.append(v)
            if parent[t] == -1:
                return flow
            push, v = float("inf"), t
            while v != s:
                a = parent[v]
                push = min(push, self.cap[a])
                v = self.to[a ^ 1]
            v = t
            while v != s:
                a = parent[v]
                self.cap[a] -= push
                self.cap[a ^ 1] += push
                v = self.to[a ^ 1]
            flow += push

    def source_side(self, s, eps):
        seen = [False] * self.n
        seen[s] = True
        q = deque([s])
        while q:
            u = q.popleft()
            for a in self.head[u]:
                v = self.to[a]
                if self.cap[a] > eps and not seen[v]:
                    seen[v] = True
                    q.append(v)
        return seen


def solve_pairwise_binary_lp(node_costs, edge_costs, edges) -> VertexSolution:
    """Minimize a binary pairwise energy over the local polytope.

    The energy is ``sum_n node_costs[n, x_n] + sum_e edge_costs[e, x_i, x_j]``
    with arbitrary (possibly non-submodular) pairwise tables. The roof-duality
    construction doubles every variable into a literal and its complement,
    solves one max-flow problem and reads the half-integral optimum off the
    minimum cut. ``structure`` is ``(node (N, 2), edge (E, 2, 2))``.
    """
    nc = np.asarray(node_costs, dtype=float)
    ec = np.asarray(edge_costs, dtype=float).reshape(-1, 2, 2)
    edges = np.asarray(edges, dtype=int).reshape(-1, 2)
    N = nc.shape[0]
    if nc.shape != (N, 2) or ec.shape[0] != len(edges):
        raise StructureError("cost arrays do not conform to the graph")
    if len(edges) and (edges.min() < 0 or edges.max() >= N):
        raise StructureError("edge references a missing node")

    unary = nc[:, 1] - nc[:, 0]
    A, B, C, D = ec[:, 0, 0], ec[:, 0, 1], ec[:, 1, 0], ec[:, 1, 1]
    i, j = edges[:, 0], edges[:, 1]
    np.add.at(unary, i, C - A)
    np.add.at(unary, j, D - C)
    pair = B + C - A - D
    np.add.at(unary, j, np.minimum(pair, 0.0))

    s, t = 2 * N, 2 * N + 1
    net = _MaxFlow(2 * N + 2)
    for p in range(N):
        u = unary[p]
        if u > 0:       # pay u when x_p = 1
            net.add_edge(s, p, u / 2)
            net.add_edge(N + p, t, u / 2)
        elif u < 0:     # pay -u when x_p = 0
            net.add_edge(p, t, -u / 2)
            net.add_edge(s, N + p, -u / 2)
    for e in range(len(edges)):
        p, q, w = i[e], j[e], pair[e]
        if w > 0:       # pay w when x_p = 0, x_q = 1
            net.add_edge(p, q, w / 2)
            net.add_edge(N + q, N + p, w / 2)
        elif w < 0:     # pay -w when x_p = 1, x_q = 1
            net.add_edge(N + p, q, -w / 2)
            net.add_edge(N + q, p, -w / 2)

    scale = max(np.abs(unary).max(initial=0.0), np.abs(pair).max(initial=0.0), 1.0)
    eps = 1e-12 * scale
    net.run(s, t, eps)
    S = net.source_side(s, eps)

    x = np.full(N, 0.5)
    for p in range(N):
        if S[p] and not S[N + p]:
            x[p] = 0.0
        elif S[N + p] and not S[p]:
            x[p] = 1.0
    node, edge = _complete_half_integral(x, ec, edges)
    objective = float(np.sum(node * nc) + np.sum(edge * ec))
    return VertexSolution((node, edge), objective)


def _complete_half_integral(x, ec, edges):
    """Cheapest edge marginals consistent with half-integral node values."""
    node = np.stack([1 - x, x], axis=1)
    edge = np.zeros((len(edges), 2, 2))
    for e, (p, q) in enumerate(edges):
        a, b = x[p], x[q]
        if a != 0.5 or b != 0.5:
            edge[e] = np.outer(node[p], node[q])
        else:
            diag = ec[e, 0, 0] + ec[e, 1, 1]
            anti = ec[e, 0, 1] + ec[e, 1, 0]
            if diag <= anti:
                edge[e, 0, 0] = edge[e, 1, 1] = 0.5
            else:
                edge[e, 0, 1] = edge[e, 1, 0] = 0.5
    return node, edge


# --------------------------------------------------------------------------
# dispatch and brute force
# --------------------------------------------------------------------------

def linear_minimizer(model: StructuredModel, cost) -> VertexSolution:
    """Vertex ``s`` of the model's structure polytope minimizing ``<s, cost>``."""
    cost = np.asarray(cost, dtype=float)
    if cost.shape != (model.dim,):
        raise StructureError(f"cost must have shape ({model.dim},)")
    if isinstance(model, BipartiteMatching):
        sol = solve_bipartite_matching(cost.reshape(model.n, model.n), perfect=model.perfect)
        sol.vertex = model.embed(sol.structure)
        return sol
    if isinstance(model, GeneralMatching):
        sol = solve_general_perfect_matching(-cost, model)
        sol.objective = -sol.objective
        return sol
    if isinstance(model, PairwiseBinaryGrid):
        node_c, edge_c = model.split(cost)
        sol = solve_pairwise_binary_lp(node_c, edge_c, model.edges)
        sol.vertex = model.join(*sol.structure)
        return sol
    raise StructureError(f"no solver for {model!r}")


def map_decode(model: StructuredModel, theta) -> VertexSolution:
    """Highest-scoring structure under ``theta`` (LP-relaxed for grids)."""
    sol = linear_minimizer(model, -model.scores(theta))
    sol.objective = -sol.objective
    return sol


def brute_force_map(model: StructuredModel, theta) -> VertexSolution:
    """Exhaustive argmax of the score; test oracle for small instances."""
    if isinstance(model, PairwiseBinaryGrid):
        if model.n_nodes > 20:
            raise SizeLimitError("brute force over labellings is capped at 2**20")
        node_pot, edge_pot = model.potentials(theta)
        best, arg = -np.inf, None
        for labels in _chunks(model.n_nodes):
            sc = node_pot[np.arange(model.n_nodes), labels].sum(1)
            if model.n_edges:
                sc = sc + edge_pot[np.arange(model.n_edges),
                                   labels[:, model.edges[:, 0]],
                                   labels[:, model.edges[:, 1]]].sum(1)
            k = int(np.argmax(sc))
            if sc[k] > best:
                best, arg = float(sc[k]), labels[k]
        return VertexSolution(arg, best, vertex=model.embed(arg))
    if isinstance(model, BipartiteMatching) and model.n > 8:
        raise SizeLimitError("brute force over permutations is capped at n = 8")
    Y = enumerate_structures(model)
    sc = Y @ model.scores(theta)
    k = int(np.argmax(sc))
    return VertexSolution(model.decode(Y[k]), float(sc[k]), vertex=Y[k])


def _chunks(n, size=1 << 16):
    total = 1 << n
    for start in range(0, total, size):
        idx = np.arange(start, min(total, start + size))
        yield ((idx[:, None] >> np.arange(n)[::-1]) & 1).astype(int)


def graph_masks(model: GeneralMatching):
    return _adjacency_masks(model)


__all__ = [
    "VertexSolution", "solve_bipartite_matching", "solve_general_perfect_matching",
    "solve_pairwise_binary_lp", "linear_minimizer", "map_decode", "brute_force_map",
    "has_perfect_matching", "perfect_matching_with", "all_labellings",
]
