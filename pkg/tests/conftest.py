import numpy as np
import pytest
from scipy.optimize import linprog

from mle_struct.models import BipartiteMatching, PairwiseBinaryGrid


def random_tree_grid(rng, n_nodes=8, C=2, D=2):
    """Random tree on ``n_nodes`` nodes (each node attaches to an earlier one)."""
    edges = [(int(rng.integers(k)), k) for k in range(1, n_nodes)]
    node_f = rng.normal(size=(n_nodes, C)) / np.sqrt(C)
    edge_f = rng.normal(size=(len(edges), D)) / np.sqrt(D)
    return PairwiseBinaryGrid(n_nodes, edges, node_f, edge_f)


def random_lattice(rng, h=3, w=3, C=2, D=2):
    n, E = h * w, (h - 1) * w + h * (w - 1)
    return PairwiseBinaryGrid.lattice(h, w, rng.normal(size=(n, C)), rng.normal(size=(E, D)))


def random_interior(model, rng, n_vertices=6, floor=0.2):
    """Interior point: random vertex mixture with weight at least ``floor`` on the center."""
    from mle_struct.map_solvers import linear_minimizer

    tau = model.init_pseudomarginals()
    weights = rng.dirichlet(np.ones(n_vertices + 1))
    weights = (1 - floor) * weights
    weights[0] += floor
    out = weights[0] * tau
    for w in weights[1:]:
        out = out + w * linear_minimizer(model, rng.normal(size=model.dim)).vertex
    return out


def pairwise_energies(nc, ec, edges, labels):
    """Energy of each row of ``labels`` under node and edge cost tables."""
    e = nc[np.arange(nc.shape[0]), labels].sum(1)
    if len(edges):
        e = e + ec[np.arange(len(edges)), labels[:, edges[:, 0]], labels[:, edges[:, 1]]].sum(1)
    return e


def local_polytope_lp(nc, ec, edges):
    """Optimal value of the local-polytope LP by a generic LP solver."""
    N, E = nc.shape[0], len(edges)
    nv = 2 * N + 4 * E
    rows, rhs = [], []
    for p in range(N):
        r = np.zeros(nv)
        r[2 * p:2 * p + 2] = 1
        rows.append(r)
        rhs.append(1.0)
    for e, (p, q) in enumerate(edges):
        base = 2 * N + 4 * e
        for a in range(2):
            r = np.zeros(nv)
            r[base + 2 * a:base + 2 * a + 2] = 1
            r[2 * p + a] = -1
            rows.append(r)
            rhs.append(0.0)
            r = np.zeros(nv)
            r[[base + a, base + 2 + a]] = 1
            r[2 * q + a] = -1
            rows.append(r)
            rhs.append(0.0)
    c = np.concatenate([nc.ravel(), ec.ravel()])
    res = linprog(c, A_eq=np.array(rows), b_eq=rhs, bounds=(0, 1), method="highs")
    assert res.status == 0
    return res.fun


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_bipartite():
    return BipartiteMatching(np.random.default_rng(5).normal(size=(3, 4, 4)))


# one summary line per acceptance criterion, filled by the ``criterion`` marker
ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if report.passed else "FAIL"
    ACCEPTANCE[number] = f"{status} criterion {number:2d} {title}" + (f": {detail}" if detail else "")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
