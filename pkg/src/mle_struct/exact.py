"""Exact ground truth at desk scale: permanents, partition functions, MLE.

Also hosts the likelihood sandwich report comparing the Bethe (``rho = 1``)
and reweighted (``rho = 1/2``) estimators with the exact MLE, and the exact
sequential sampler for bipartite matching distributions.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp

from .dual import _check_lam
from .exceptions import SizeLimitError, StructureError
from .frank_wolfe import FWConfig, fw_infer, fw_learn
from .models import (BipartiteMatching, Dataset, PairwiseBinaryGrid, StructuredModel,
                     enumerate_structures)

MAX_RYSER = 20
#: largest bipartite side handled by exact_partition (n^2 minors of size n-1)
MAX_RYSER_PARTITION = 12
_CHUNK = 1 << 14

RYSER = "ryser"
ENUMERATION = "enumeration"


# --------------------------------------------------------------------------
# permanents
# --------------------------------------------------------------------------

def _ryser_scaled(A):
    """Permanent of a matrix with entries in ``[0, 1]``-ish, in long double.

    Inclusion-exclusion over column subsets visited in Gray-code order, so
    consecutive subsets differ by one column and row sums update in O(n).
    """
    n = A.shape[0]
    if n == 0:
        return np.longdouble(1)
    A = A.astype(np.longdouble)
    total = 1 << n
    acc = np.longdouble(0)
    row_sums = np.zeros(n, dtype=np.longdouble)
    for start in range(1, total, _CHUNK):
        k = np.arange(start, min(total, start + _CHUNK), dtype=np.int64)
        col = np.log2(k & -k).astype(np.int64)
        gray = k ^ (k >> 1)
        sign = np.where((gray >> col) & 1, 1, -1).astype(np.longdouble)
        sums = row_sums + np.cumsum(sign[:, None] * A[:, col].T, axis=0)
        prods = np.prod(sums, axis=1)
        # |S| has the parity of k because each Gray step flips one bit
        acc += np.sum(np.where(k & 1, -prods, prods))
        # resynchronize from the subset itself to stop drift across chunks
        last = int(gray[-1])
        row_sums = A[:, [c for c in range(n) if last >> c & 1]].sum(axis=1)
    return acc if n % 2 == 0 else -acc


def log_permanent(A):
    """``log per(A)`` for a nonnegative square matrix, with per-row rescaling.

    Returns ``-inf`` when the permanent vanishes.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise StructureError(f"permanent needs a square matrix, got shape {A.shape}")
    n = A.shape[0]
    if n > MAX_RYSER:
        raise SizeLimitError(f"Ryser's algorithm is capped at n = {MAX_RYSER}")
    if np.any(A < 0) or not np.all(np.isfinite(A)):
        raise StructureError("log_permanent needs finite nonnegative entries")
    if n == 0:
        return 0.0
    scale = A.max(axis=1)
    if np.any(scale == 0):
        return -np.inf
    p = _ryser_scaled(A / scale[:, None])
    if p <= 0:
        return -np.inf
    return float(np.sum(np.log(scale)) + np.log(p))


def ryser_permanent(A):
    """Permanent of a square matrix by Ryser's formula, ``O(2^n n)``.

    Nonnegative inputs go through the rescaled log-domain path so large entries
    do not overflow the intermediate products; other inputs are evaluated
    directly in long double.

    Examples
    --------
    >>> ryser_permanent(np.ones((3, 3)))
    6.0
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise StructureError(f"permanent needs a square matrix, got shape {A.shape}")
    if A.shape[0] > MAX_RYSER:
        raise SizeLimitError(f"Ryser's algorithm is capped at n = {MAX_RYSER}")
    if not np.all(np.isfinite(A)):
        raise StructureError("matrix has non-finite entries")
    if np.all(A >= 0):
        return float(np.exp(log_permanent(A)))
    return float(_ryser_scaled(A))


# --------------------------------------------------------------------------
# exact inference
# --------------------------------------------------------------------------

@dataclass
class ExactInferenceResult:
    log_z: float
    marginals: np.ndarray
    method: str


def _bipartite_exact(model: BipartiteMatching, theta):
    n = model.n
    if n > MAX_RYSER_PARTITION:
        raise SizeLimitError(f"exact bipartite inference is capped at n = {MAX_RYSER_PARTITION}")
    W = model.scores(theta).reshape(n, n)
    shift = W.max(axis=1, keepdims=True)
    A = np.exp(W - shift)
    log_per = log_permanent(A)
    T = np.zeros((n, n))
    for i in range(n):
        rows = np.delete(np.arange(n), i)
        for j in range(n):
            minor = A[np.ix_(rows, np.delete(np.arange(n), j))]
            T[i, j] = np.exp(np.log(A[i, j]) + log_permanent(minor) - log_per)
    return ExactInferenceResult(float(log_per + shift.sum()), T.ravel(), RYSER)


def _grid_exact(model: PairwiseBinaryGrid, theta, limit=1 << 20):
    N = model.n_nodes
    if 2 ** N > limit:
        raise SizeLimitError(f"{2 ** N} labellings exceed the cap {limit}")
    node_pot, edge_pot = model.potentials(theta)
    i, j = model.edges[:, 0], model.edges[:, 1]
    chunk_scores, chunk_labels = [], []
    size = 1 << 16
    for start in range(0, 2 ** N, size):
        idx = np.arange(start, min(2 ** N, start + size))
        lab = (idx[:, None] >> np.arange(N)[::-1]) & 1
        sc = node_pot[np.arange(N), lab].sum(1)
        if model.n_edges:
            sc = sc + edge_pot[np.arange(model.n_edges), lab[:, i], lab[:, j]].sum(1)
        chunk_scores.append(sc)
        chunk_labels.append(lab)
    log_z = float(logsumexp(np.concatenate(chunk_scores)))
    node = np.zeros((N, 2))
    edge = np.zeros((model.n_edges, 2, 2))
    for sc, lab in zip(chunk_scores, chunk_labels):
        p = np.exp(sc - log_z)
        on = p @ lab
        node[:, 1] += on
        node[:, 0] += p.sum() - on
        if model.n_edges:
            state = 2 * lab[:, i] + lab[:, j]
            for s in range(4):
                edge[:, s // 2, s % 2] += p @ (state == s)
    return ExactInferenceResult(log_z, model.join(node, edge), ENUMERATION)


def exact_partition(model: StructuredModel, theta) -> ExactInferenceResult:
    """Exact ``log Z`` and marginals.

    Perfect bipartite matchings use ``Z = per(exp(W))`` with marginals from the
    permanents of minors; every other model is enumerated.
    """
    theta = model.check_theta(theta)
    if isinstance(model, BipartiteMatching) and model.perfect:
        return _bipartite_exact(model, theta)
    if isinstance(model, PairwiseBinaryGrid):
        return _grid_exact(model, theta)
    Y = enumerate_structures(model)
    sc = Y @ model.scores(theta)
    log_z = float(logsumexp(sc))
    return ExactInferenceResult(log_z, np.exp(sc - log_z) @ Y, ENUMERATION)


def _unique_models(data: Dataset):
    """Group sample indices by model object so shared models are solved once."""
    groups = {}
    for m, mdl in enumerate(data.models):
        groups.setdefault(id(mdl), (mdl, []))[1].append(m)
    return list(groups.values())


def _exact_terms(data: Dataset, theta):
    """``sum_m log Z_m`` and ``sum_m Phi_m^T mu_m`` at ``theta``."""
    log_z, expect = 0.0, np.zeros(len(theta))
    for mdl, idx in _unique_models(data):
        res = exact_partition(mdl, theta)
        log_z += len(idx) * res.log_z
        expect += len(idx) * mdl.feature_expectation(res.marginals)
    return log_z, expect


def exact_log_likelihood(data: Dataset, theta, lam: float = 0.0):
    """Regularized log-likelihood ``sum_m log p(Y_m | X_m; theta) - lam/2 |theta|^2``."""
    theta = np.asarray(theta, dtype=float)
    log_z, _ = _exact_terms(data, theta)
    return float(data.empirical_features @ theta - log_z - 0.5 * lam * theta @ theta)


def exact_gradient(data: Dataset, theta, lam: float = 0.0):
    """Empirical minus model feature expectations, minus ``lam * theta``."""
    theta = np.asarray(theta, dtype=float)
    _, expect = _exact_terms(data, theta)
    return data.empirical_features - expect - lam * theta


@dataclass
class MLEResult:
    theta: np.ndarray
    log_likelihood: float
    grad_norm: float
    iterations: int
    converged: bool


def exact_mle(data: Dataset, lam: float, theta0=None, tol: float = 1e-8,
              max_iters: int = 10000) -> MLEResult:
    """Exact regularized MLE by gradient ascent.

    Barzilai-Borwein trial steps with Armijo backtracking. The sufficient
    increase test tolerates a few ulps of the objective so that progress is
    still possible once the decrease falls below its rounding level.
    """
    lam = _check_lam(lam)
    K = data.model.n_features
    theta = np.zeros(K) if theta0 is None else np.array(theta0, dtype=float)
    if theta.shape != (K,):
        raise StructureError(f"theta0 must have length {K}")

    def evaluate(th):
        log_z, expect = _exact_terms(data, th)
        f = float(data.empirical_features @ th - log_z - 0.5 * lam * th @ th)
        return f, data.empirical_features - expect - lam * th

    f, g = evaluate(theta)
    step = 1.0 / (lam + data.M)
    it = 0
    while np.linalg.norm(g) > tol and it < max_iters:
        it += 1
        while True:
            cand = theta + step * g
            f_new, g_new = evaluate(cand)
            noise = 16 * np.finfo(float).eps * max(1.0, abs(f))
            if f_new >= f + 1e-4 * step * (g @ g) - noise or step < 1e-16:
                break
            step *= 0.5
        s, y = cand - theta, g - g_new
        theta, f, g = cand, f_new, g_new
        sy = s @ y
        step = (s @ s) / sy if sy > 0 else 1.0 / (lam + data.M)
    gn = float(np.linalg.norm(g))
    return MLEResult(theta, f, gn, it, gn <= tol)


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

def sample_matchings(W, M: int, rng=None):
    """Exact samples from ``p(Y) ∝ exp(<W, Y>)`` over ``n x n`` permutations.

    Rows are assigned in order; row ``i`` picks column ``j`` with probability
    proportional to ``exp(W_ij) per(A[rows > i, remaining columns - j])``.
    Returns an ``(M, n)`` integer array of permutations.
    """
    W = np.asarray(W, dtype=float)
    n = W.shape[0]
    if W.shape != (n, n):
        raise StructureError("W must be square")
    if n > MAX_RYSER_PARTITION:
        raise SizeLimitError(f"exact sampling is capped at n = {MAX_RYSER_PARTITION}")
    rng = np.random.default_rng(rng)
    A = np.exp(W - W.max(axis=1, keepdims=True))
    cache = {}

    def log_per(row, cols):
        key = (row, cols)
        if key not in cache:
            cache[key] = log_permanent(A[np.ix_(range(row, n), cols)])
        return cache[key]

    out = np.empty((M, n), dtype=int)
    for m in range(M):
        cols = tuple(range(n))
        for i in range(n):
            logw = np.array([np.log(A[i, c]) + log_per(i + 1, tuple(x for x in cols if x != c))
                             for c in cols])
            p = np.exp(logw - logsumexp(logw))
            c = cols[int(rng.choice(len(cols), p=p / p.sum()))]
            out[m, i] = c
            cols = tuple(x for x in cols if x != c)
    return out


# --------------------------------------------------------------------------
# sandwich bounds
# --------------------------------------------------------------------------

def approx_log_likelihood(data: Dataset, theta, lam: float, rho=None,
                          config: FWConfig | None = None):
    """Surrogate likelihood with ``log Z_rho`` from :func:`fw_infer`.

    Returns ``(value, gap)``: the true surrogate likelihood lies in
    ``[value - gap, value]``.
    """
    config = config or FWConfig(max_iters=5000, gap_tol=1e-9)
    theta = np.asarray(theta, dtype=float)
    log_z, gap = 0.0, 0.0
    for mdl, idx in _unique_models(data):
        res = fw_infer(mdl, theta, rho, config)
        log_z += len(idx) * res.log_z
        gap += len(idx) * res.gap
    value = float(data.empirical_features @ theta - log_z - 0.5 * lam * theta @ theta)
    return value, float(gap)


@dataclass
class InequalityCheck:
    name: str
    lhs: float
    rhs: float
    slack: float
    ok: bool


@dataclass
class SandwichReport:
    """Per-sample likelihoods of the three estimators and their cross terms."""

    M: int
    lower: float
    exact: float
    upper: float
    cross_terms: dict
    gaps: dict
    checks: list = field(default_factory=list)
    ordering: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    def to_dict(self):
        d = asdict(self)
        d["ok"] = self.ok
        return d

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def _check(name, lhs, rhs, slack):
    return InequalityCheck(name, float(lhs), float(rhs), float(slack), bool(lhs <= rhs + slack))


def sandwich_bounds(data: Dataset, lam: float, theta_bethe, theta_rw, learn_gaps=(0.0, 0.0),
                    theta_exact=None, infer_config: FWConfig | None = None,
                    tol: float = 1e-6) -> SandwichReport:
    """Check ``l_RW(W_RW) <= l(W*) <= l_B(W_B)`` and the chains at fixed ``W``.

    Parameters
    ----------
    theta_bethe, theta_rw : array_like
        Estimators learned with ``rho = 1`` and ``rho = 1/2``.
    learn_gaps : (float, float)
        Final FW duality gaps of the two learning runs. The Bethe gap bounds
        how far ``l_B(theta_bethe)`` is below the Bethe optimum.
    theta_exact : array_like, optional
        Exact MLE; computed with :func:`exact_mle` when omitted.
    tol : float
        Additive slack on top of the certificates.

    Notes
    -----
    Every approximate likelihood is evaluated with FW inference and carries its
    inference gap; all reported numbers are divided by ``M``.
    """
    lam = _check_lam(lam)
    M = data.M
    if M == 0:
        raise StructureError("sandwich bounds need at least one sample")
    if theta_exact is None:
        theta_exact = exact_mle(data, lam).theta
    thetas = {"B": np.asarray(theta_bethe, float), "RW": np.asarray(theta_rw, float)}
    rhos = {"B": 1.0, "RW": 0.5}
    approx, inf_gap, exact = {}, {}, {}
    for est, th in thetas.items():
        exact[est] = exact_log_likelihood(data, th, lam) / M
        for kind, rho in rhos.items():
            v, g = approx_log_likelihood(data, th, lam, rho, infer_config)
            approx[kind, est] = v / M
            inf_gap[kind, est] = g / M
    l_star = exact_log_likelihood(data, theta_exact, lam) / M
    gB, gRW = (g / M for g in learn_gaps)
    checks = [
        _check("rw_opt <= exact_opt", approx["RW", "RW"], l_star, inf_gap["RW", "RW"] + tol),
        _check("exact_opt <= bethe_opt", l_star, approx["B", "B"], gB + tol),
    ]
    for est in ("B", "RW"):
        checks.append(_check(f"rw(W_{est}) <= exact(W_{est})", approx["RW", est], exact[est],
                             inf_gap["RW", est] + tol))
        checks.append(_check(f"exact(W_{est}) <= bethe(W_{est})", exact[est], approx["B", est],
                             inf_gap["B", est] + tol))
    cross = {
        "bethe(W_RW)": approx["B", "RW"], "rw(W_B)": approx["RW", "B"],
        "exact(W_B)": exact["B"], "exact(W_RW)": exact["RW"],
    }
    gaps = {"learn_bethe": gB, "learn_rw": gRW}
    gaps.update({f"infer_{k}(W_{e})": v for (k, e), v in inf_gap.items()})
    ordering = {
        "exact(W*) - exact(W_B)": l_star - exact["B"],
        "exact(W*) - exact(W_RW)": l_star - exact["RW"],
        "bethe_at_least_rw": bool(exact["B"] >= exact["RW"]),
    }
    return SandwichReport(M, approx["RW", "RW"], l_star, approx["B", "B"], cross, gaps,
                          checks, ordering)


# --------------------------------------------------------------------------
# finite differences
# --------------------------------------------------------------------------

def finite_difference_check(f, grad, points, h: float = 1e-6, mask=None):
    """Worst relative error between ``grad`` and central differences of ``f``.

    The error at a point is ``max |g - fd| / max(max |g|, 1)``, so coordinates
    with tiny derivatives are compared on an absolute scale.
    """
    worst = 0.0
    for x in points:
        x = np.asarray(x, dtype=float)
        g = np.asarray(grad(x), dtype=float)
        fd = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            if mask is not None and not mask[idx]:
                continue
            e = np.zeros_like(x)
            e[idx] = h
            fd[idx] = (f(x + e) - f(x - e)) / (2 * h)
        if mask is not None:
            g = np.where(mask, g, 0.0)
        err = np.max(np.abs(g - fd), initial=0.0) / max(np.max(np.abs(g), initial=0.0), 1.0)
        worst = max(worst, float(err))
    return worst


def learn_sandwich(data: Dataset, lam: float, config: FWConfig | None = None,
                   infer_config: FWConfig | None = None, tol: float = 1e-6):
    """Train the Bethe and reweighted estimators, then build the sandwich report."""
    config = config or FWConfig(max_iters=3000, gap_tol=1e-6)
    bethe = fw_learn(data, 1.0, lam, config)
    rw = fw_learn(data, 0.5, lam, config)
    report = sandwich_bounds(data, lam, bethe.theta, rw.theta, (bethe.gap, rw.gap),
                             infer_config=infer_config, tol=tol)
    return report, bethe, rw
