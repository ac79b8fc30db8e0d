"""Frank-Wolfe learning (batch and block-coordinate) and FW marginal inference.

The learner minimizes the dual ``L(tau)`` over the product of the per-sample
structure polytopes. Each iteration calls a MAP oracle once per touched sample
and yields the duality gap ``<tau - s, grad L(tau)>`` as a stopping certificate.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .dual import (GramCache, LineSearchTerms, _check_lam, dual_objective,
                   grad_dual, grad_dual_block, moment_residual)
from .exceptions import (BoundaryError, GradientUndefinedError, InvariantViolation,
                         MLEStructError, SolverError, StructureError)
from .free_energy import entropy_gradient_fn, free_energy_value
from .map_solvers import linear_minimizer
from .models import Dataset, StructuredModel

BATCH = "batch"
BLOCK = "block"
DECAY = "decay"
LINESEARCH = "linesearch"
STANDARD = "standard"
AWAY = "away"

#: line search never moves closer than this to the target vertex
BOUNDARY_EPS = 1e-12


@dataclass
class FWConfig:
    """Knobs shared by :func:`fw_learn`, :func:`bcfw_learn` and :func:`fw_infer`.

    ``max_iters`` counts FW steps: batch steps in batch mode, single-sample
    steps in block mode. ``subproblem_tol`` is the multiplicative accuracy of
    the MAP oracle (0 for exact solvers); a positive value only marks the trace
    as inexact. ``variant="away"`` enables away steps in :func:`fw_infer`
    (line-search rule only); the learners always take standard FW steps.
    ``contraction`` is the initial shrinkage ``eps`` of the polytope seen by
    standard FW steps (0 disables it); see :func:`fw_infer`.
    """

    mode: str = BATCH
    step_rule: str = LINESEARCH
    max_iters: int = 1000
    gap_tol: float = 1e-6
    subproblem_tol: float = 0.0
    averaging: bool = False
    rng_seed: int = 0
    n_jobs: int = 1
    refresh_every: int = 1000
    validate_every: int = 100
    time_limit: float | None = None
    variant: str = STANDARD
    contraction: float = 0.01

    def __post_init__(self):
        if self.mode not in (BATCH, BLOCK):
            raise ValueError(f"mode must be {BATCH!r} or {BLOCK!r}, got {self.mode!r}")
        if self.step_rule not in (DECAY, LINESEARCH):
            raise ValueError(f"step_rule must be {DECAY!r} or {LINESEARCH!r}")
        if self.variant not in (STANDARD, AWAY):
            raise ValueError(f"variant must be {STANDARD!r} or {AWAY!r}")
        if self.variant == AWAY and self.step_rule != LINESEARCH:
            raise ValueError("away steps need the line-search rule")
        if not self.gap_tol > 0:
            raise ValueError("gap_tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.subproblem_tol < 0:
            raise ValueError("subproblem_tol must be nonnegative")
        if self.n_jobs < 1:
            raise ValueError("n_jobs must be at least 1")
        if not 0 <= self.contraction < 1:
            raise ValueError("contraction must lie in [0, 1)")


@dataclass(frozen=True)
class FWTrace:
    """One recorded iterate."""

    t: int
    objective: float
    gap: float
    gamma: float
    seconds: float
    inexact: bool = False


@dataclass
class FWResult:
    theta: np.ndarray
    tau: np.ndarray
    trace: list
    gap: float
    sample_gaps: np.ndarray
    converged: bool
    iterations: int
    theta_avg: np.ndarray | None = None
    tau_avg: np.ndarray | None = None

    @property
    def objective(self) -> float:
        return self.trace[-1].objective


@dataclass
class InferenceResult:
    """FW minimizer of the free energy for fixed parameters.

    ``log_z`` is ``-F_rho(tau)``; the true ``log Z_rho`` lies in
    ``[log_z, log_z + gap]``.
    """

    tau: np.ndarray
    log_z: float
    gap: float
    converged: bool
    iterations: int
    trace: list = field(default_factory=list)


def decay_step(t, M: int = 1):
    """``2M / (2M + t)``; ``M = 1`` is the batch schedule."""
    return 2.0 * M / (2.0 * M + t)


def duality_gap(tau, s, grad):
    """FW gap ``<tau - s, grad>``; upper-bounds suboptimality when ``s`` is exact."""
    return float(np.sum((np.asarray(tau) - np.asarray(s)) * np.asarray(grad)))


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

@contextmanager
def _executor(n_jobs):
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            yield pool
    else:
        yield None


def _solve(map_solver, model, cost, m):
    try:
        sol = map_solver(model, cost)
    except MLEStructError as exc:
        raise SolverError(f"MAP solver failed on sample {m}: {exc}", sample=m) from exc
    except Exception as exc:  # third-party solver errors
        raise SolverError(f"MAP solver failed on sample {m}: {exc}", sample=m) from exc
    vertex = sol.vertex if sol.vertex is not None else model.embed(sol.structure)
    return np.asarray(vertex, dtype=float), bool(sol.exact)


def _lmo_all(models, grad, map_solver, pool):
    # samples sharing a model and a gradient row share the oracle answer
    first, owner = {}, []
    for m in range(len(models)):
        owner.append(first.setdefault((id(models[m]), grad[m].tobytes()), m))
    jobs = sorted(set(owner))
    if pool is None:
        out = [_solve(map_solver, models[m], grad[m], m) for m in jobs]
    else:
        out = list(pool.map(lambda m: _solve(map_solver, models[m], grad[m], m), jobs))
    solved = dict(zip(jobs, out))
    S = np.array([solved[o][0] for o in owner]).reshape(grad.shape)
    return S, all(e for _, e in out)


def _bisect_derivative(dfun, upper, x_tol=1e-12):
    """Root of a nondecreasing derivative on ``[0, upper]`` (or an endpoint).

    Brent's bracketing method, which falls back to bisection whenever its
    interpolation step leaves the bracket.
    """
    if dfun(0.0) >= 0:
        return 0.0
    try:
        d_up = dfun(upper)
    except BoundaryError:
        d_up = np.inf
    if d_up <= 0:
        return upper
    if not np.isfinite(d_up):
        # Brent needs finite bracket values; bisect with the boundary as +inf
        return _bisect_interval(dfun, 0.0, upper, x_tol)
    return brentq(dfun, 0.0, upper, xtol=x_tol, rtol=4 * np.finfo(float).eps)


def _bisect_interval(dfun, lo, hi, x_tol):
    while hi - lo > x_tol:
        mid = 0.5 * (lo + hi)
        try:
            d = dfun(mid)
        except BoundaryError:
            d = np.inf
        if d > 0:
            hi = mid
        else:
            lo = mid
    return lo


def _segment_slope(model, tau, d, rho, grad=None):
    """``eta -> d/d eta H(tau + eta d)``."""
    grad = grad or entropy_gradient_fn(model, rho)

    def slope(eta):
        try:
            g = grad(tau + eta * d)
        except GradientUndefinedError as exc:
            raise BoundaryError(f"line search reached the boundary at eta={eta}") from exc
        val = float(np.sum(g * d))
        if not np.isfinite(val):
            raise BoundaryError(f"non-finite entropy slope at eta={eta}")
        return val

    return slope


def line_search(tau, s, cache: GramCache, rho, lam, m=None, upper=1 - BOUNDARY_EPS,
                grad_fn=None):
    """Exact step along ``s - tau`` for the dual objective.

    The quadratic part comes from the scalars in :class:`LineSearchTerms`, so a
    trial step costs one entropy-gradient evaluation. ``m`` selects a single
    sample (block mode); otherwise ``tau`` and ``s`` are ``(M, dim)``.
    ``grad_fn`` optionally supplies a prebuilt :func:`entropy_gradient_fn`.
    """
    tau = np.asarray(tau, dtype=float)
    s = np.asarray(s, dtype=float)
    terms = LineSearchTerms.from_cache(cache, s, lam, m)
    model = cache.data.model if m is None else cache.data.models[m]
    h_slope = _segment_slope(model, tau, s - tau, rho, grad_fn)
    return _bisect_derivative(lambda eta: terms.quadratic_slope(eta) - h_slope(eta), upper)


def _initial_tau(data: Dataset, init):
    if init is None:
        tau = np.array([mdl.init_pseudomarginals() for mdl in data.models], dtype=float)
    else:
        tau = np.array(init, dtype=float)
        if tau.shape != data.observations.shape:
            raise StructureError(f"init has shape {tau.shape}, expected {data.observations.shape}")
    for m, mdl in enumerate(data.models):
        if not mdl.validate(tau[m]):
            raise StructureError(f"initial pseudomarginals of sample {m} are infeasible")
    return tau


def _check_feasible(data, tau, t):
    for m, mdl in enumerate(data.models):
        if not mdl.validate(tau[m], tol=1e-9):
            raise InvariantViolation(f"iterate {t} left the polytope on sample {m}")


class _Averager:
    """Running average with weight ``2 / (t + 2)`` on iterate ``t``."""

    def __init__(self, tau):
        self.value = np.array(tau, dtype=float)

    def update(self, t, tau):
        w = 2.0 / (t + 2.0)
        self.value = (1 - w) * self.value + w * tau


def _contract(tau, s, grad, gap, eps, center):
    """Shrink ``s`` toward ``center`` by ``eps``, halving ``eps`` while the shrunken face binds.

    Returns the shrunken vertex and the (possibly reduced) ``eps``.
    """
    while eps > 0 and duality_gap(tau, s + eps * (center - s), grad) <= 0.25 * gap:
        eps = eps / 2 if eps > 1e-12 else 0.0
    return s + eps * (center - s), eps


def _setup(data, lam, config, map_solver):
    if data.M == 0:
        raise StructureError("dataset has no samples")
    lam = _check_lam(lam)
    config = config or FWConfig()
    return lam, config, map_solver or linear_minimizer


def _finish(data, lam, cache, trace, sample_gaps, converged, t, avg):
    cache.refresh()
    tau = cache.tau.copy()
    theta = moment_residual(tau, data) / lam
    res = FWResult(theta, tau, trace, float(np.sum(sample_gaps)), sample_gaps, converged, t)
    if avg is not None:
        res.tau_avg = avg.value
        res.theta_avg = moment_residual(avg.value, data) / lam
    return res


# --------------------------------------------------------------------------
# learning
# --------------------------------------------------------------------------

def fw_learn(data: Dataset, rho=None, lam: float = 1.0, config: FWConfig | None = None,
             map_solver=None, init=None, callback=None) -> FWResult:
    """Approximate MLE by Frank-Wolfe on the dual objective.

    Parameters
    ----------
    data : Dataset
    rho : float or array_like, optional
        Counting numbers; defaults to the model's (1 for matchings, 0.5 for grids).
    lam : float
        Total (not per-sample) L2 regularization weight.
    config : FWConfig, optional
        ``config.mode == "block"`` dispatches to :func:`bcfw_learn`.
    map_solver : callable, optional
        ``(model, cost) -> VertexSolution`` minimizing ``<s, cost>``.
    init : array_like, optional
        ``(M, dim)`` feasible starting point; uniform by default.
    callback : callable, optional
        Called as ``callback(t, tau, theta)`` at every recorded iterate.

    Returns
    -------
    FWResult
        ``theta`` is ``theta_star`` of the final iterate.
    """
    lam, config, map_solver = _setup(data, lam, config, map_solver)
    if config.variant != STANDARD:
        raise ValueError("the learners take standard FW steps only")
    if config.mode == BLOCK:
        return bcfw_learn(data, rho, lam, config, map_solver, init, callback)
    cache = GramCache(data, _initial_tau(data, init), config.refresh_every)
    grad_fn = entropy_gradient_fn(data.model, rho)
    eps = config.contraction
    centers = _initial_tau(data, None) if eps > 0 else None
    avg = _Averager(cache.tau) if config.averaging else None
    trace = []
    start = time.perf_counter()
    t, gamma, converged = 0, 0.0, False
    with _executor(config.n_jobs) as pool:
        while True:
            grad = grad_dual(cache.tau, data, lam, rho, cache)
            S, exact = _lmo_all(data.models, grad, map_solver, pool)
            sample_gaps = np.einsum("md,md->m", cache.tau - S, grad)
            gap = float(np.sum(sample_gaps))
            obj = dual_objective(cache.tau, data, lam, rho, residual=cache.residual)
            trace.append(FWTrace(t, obj, gap, gamma, time.perf_counter() - start,
                                 not exact or config.subproblem_tol > 0))
            if callback is not None:
                callback(t, cache.tau, cache.residual / lam)
            if gap <= config.gap_tol:
                converged = True
                break
            if t >= config.max_iters:
                break
            if config.time_limit is not None and time.perf_counter() - start > config.time_limit:
                break
            t += 1
            if eps > 0:
                S, eps = _contract(cache.tau, S, grad, gap, eps, centers)
            if config.step_rule == DECAY:
                gamma = decay_step(t)
            else:
                gamma = line_search(cache.tau, S, cache, rho, lam, grad_fn=grad_fn)
            cache.step_all(gamma, S - cache.tau)
            if t % config.refresh_every == 0:
                cache.refresh()
            if config.validate_every and t % config.validate_every == 0:
                _check_feasible(data, cache.tau, t)
            if avg is not None:
                avg.update(t, cache.tau)
    return _finish(data, lam, cache, trace, sample_gaps, converged, t, avg)


def bcfw_learn(data: Dataset, rho=None, lam: float = 1.0, config: FWConfig | None = None,
               map_solver=None, init=None, callback=None) -> FWResult:
    """Block-coordinate variant: one uniformly drawn sample per step.

    Steps use ``2M / (2M + t)`` under the decay rule. The objective and the
    full duality gap are evaluated once per ``M`` block steps; with ``M = 1``
    this reproduces :func:`fw_learn`.
    """
    lam, config, map_solver = _setup(data, lam, config, map_solver)
    M = data.M
    rng = np.random.default_rng(config.rng_seed)
    cache = GramCache(data, _initial_tau(data, init), config.refresh_every)
    built = {}
    for mdl in data.models:
        if id(mdl) not in built:
            built[id(mdl)] = entropy_gradient_fn(mdl, rho)
    grad_fns = [built[id(mdl)] for mdl in data.models]
    eps = config.contraction
    centers = _initial_tau(data, None) if eps > 0 else None
    avg = _Averager(cache.tau) if config.averaging else None
    trace = []
    start = time.perf_counter()
    t, gamma, converged = 0, 0.0, False
    with _executor(config.n_jobs) as pool:
        while True:
            grad = grad_dual(cache.tau, data, lam, rho, cache)
            S, exact = _lmo_all(data.models, grad, map_solver, pool)
            sample_gaps = np.einsum("md,md->m", cache.tau - S, grad)
            gap = float(np.sum(sample_gaps))
            obj = dual_objective(cache.tau, data, lam, rho, residual=cache.residual)
            trace.append(FWTrace(t, obj, gap, gamma, time.perf_counter() - start,
                                 not exact or config.subproblem_tol > 0))
            if callback is not None:
                callback(t, cache.tau, cache.residual / lam)
            if gap <= config.gap_tol:
                converged = True
                break
            if t >= config.max_iters:
                break
            if config.time_limit is not None and time.perf_counter() - start > config.time_limit:
                break
            if eps > 0:
                _, eps = _contract(cache.tau, S, grad, gap, eps, centers)
            fresh = True
            for _ in range(M):
                if t >= config.max_iters:
                    break
                m = int(rng.integers(M))
                tau_m = cache.tau[m].copy()
                if fresh:
                    s = S[m]
                else:
                    g = grad_dual_block(m, tau_m, data, lam, cache.residual, rho)
                    s, _ = _solve(map_solver, data.models[m], g, m)
                if eps > 0:
                    s = s + eps * (centers[m] - s)
                t += 1
                if config.step_rule == DECAY:
                    gamma = decay_step(t, M)
                else:
                    gamma = line_search(tau_m, s, cache, rho, lam, m=m, grad_fn=grad_fns[m])
                cache.update(m, tau_m + gamma * (s - tau_m))
                fresh = False
                if config.validate_every and t % config.validate_every == 0:
                    _check_feasible(data, cache.tau, t)
                if avg is not None:
                    avg.update(t, cache.tau)
    return _finish(data, lam, cache, trace, sample_gaps, converged, t, avg)


# --------------------------------------------------------------------------
# inference
# --------------------------------------------------------------------------

def fw_infer(model: StructuredModel, theta, rho=None, config: FWConfig | None = None,
             map_solver=None, init=None) -> InferenceResult:
    """Minimize ``F_rho(tau; theta)`` over the model polytope with FW.

    Returns ``-F_rho`` at the final iterate as the ``log Z_rho`` estimate along
    with its gap certificate. With ``config.variant == "away"`` the iterate is
    kept as an explicit convex combination of the initializer and the visited
    vertices, and steps away from the worst atom are taken whenever they
    promise more decrease than the FW direction. This avoids the zig-zagging
    of plain FW when the optimum sits close to a face of the polytope.

    With ``config.contraction = eps > 0`` (standard variant) the linear
    oracle's vertex ``s`` is replaced by ``(1 - eps) s + eps u`` for the
    interior point ``u`` of :meth:`init_pseudomarginals`, which keeps the
    iterates a distance of order ``eps`` from the boundary where the entropy
    curvature blows up. ``eps`` is halved whenever the gap over the shrunken
    polytope drops below a quarter of the full gap, i.e. when the shrunken
    boundary is what holds the iterate back. The reported certificate is
    always the gap over the full polytope.
    """
    config = config or FWConfig()
    map_solver = map_solver or linear_minimizer
    w = model.scores(theta)
    tau = model.init_pseudomarginals() if init is None else np.array(init, dtype=float)
    if not model.validate(tau):
        raise StructureError("initial pseudomarginals are infeasible")
    grad_fn = entropy_gradient_fn(model, rho)
    away = config.variant == AWAY
    atoms = {b"init": [tau.copy(), 1.0]}
    eps = 0.0 if away else config.contraction
    center = model.init_pseudomarginals() if eps > 0 else None
    trace = []
    start = time.perf_counter()
    t, gamma, converged = 0, 0.0, False
    while True:
        grad = -w - grad_fn(tau)
        s, exact = _solve(map_solver, model, grad, 0)
        gap = duality_gap(tau, s, grad)
        if eps > 0:
            s, eps = _contract(tau, s, grad, gap, eps, center)
        obj = float(free_energy_value(model, tau, theta, rho))
        trace.append(FWTrace(t, obj, gap, gamma, time.perf_counter() - start,
                             not exact or config.subproblem_tol > 0))
        if gap <= config.gap_tol:
            converged = True
            break
        if t >= config.max_iters:
            break
        if config.time_limit is not None and time.perf_counter() - start > config.time_limit:
            break
        t += 1
        if config.step_rule == DECAY:
            gamma = decay_step(t)
            tau = tau + gamma * (s - tau)
        elif not away:
            gamma = _segment_step(model, w, tau, s - tau, rho, grad_fn, 1 - BOUNDARY_EPS)
            tau = tau + gamma * (s - tau)
        else:
            tau, gamma = _away_step(model, w, tau, s, grad, gap, atoms, rho, grad_fn)
        if config.validate_every and t % config.validate_every == 0 and not model.validate(tau):
            raise InvariantViolation(f"inference iterate {t} left the polytope")
    return InferenceResult(tau, -trace[-1].objective, max(gap, 0.0), converged, t, trace)


def _segment_step(model, w, tau, d, rho, grad_fn, upper):
    """Exact minimizer of the free energy on ``tau + eta d``, ``eta in [0, upper]``."""
    d_lin = -float(w @ d)
    h_slope = _segment_slope(model, tau, d, rho, grad_fn)
    return _bisect_derivative(lambda eta: d_lin - h_slope(eta), upper)


def _away_step(model, w, tau, s, grad, fw_gap, atoms, rho, grad_fn):
    key_v, (v, alpha_v) = max(atoms.items(), key=lambda kv: float(kv[1][0] @ grad))
    away_gap = float((v - tau) @ grad)
    if away_gap > fw_gap and alpha_v < 1.0:
        gamma_max = alpha_v / (1.0 - alpha_v)
        gamma = _segment_step(model, w, tau, tau - v, rho, grad_fn, gamma_max)
        if gamma > 0:
            for atom in atoms.values():
                atom[1] *= 1 + gamma
            if gamma >= gamma_max:
                del atoms[key_v]
            else:
                atoms[key_v][1] -= gamma
            return tau + gamma * (tau - v), gamma
        # no representable progress away from v: fall back to a FW step
    eta = _segment_step(model, w, tau, s - tau, rho, grad_fn, 1 - BOUNDARY_EPS)
    for atom in atoms.values():
        atom[1] *= 1 - eta
    key = s.tobytes()
    if key in atoms:
        atoms[key][1] += eta
    else:
        atoms[key] = [s.copy(), eta]
    return tau + eta * (s - tau), eta


# --------------------------------------------------------------------------
# curvature diagnostic
# --------------------------------------------------------------------------

def curvature_bound_estimate(data: Dataset, rho=None, lam: float = 1.0, n_probes: int = 200,
                             margin: float = 1e-3, seed: int = 0, map_solver=None):
    """Empirical lower bound on the FW curvature constant of ``L``.

    Probe points are ``(1 - margin) v + margin * tau0`` for random vertices
    ``v`` (drawn by the MAP oracle under Gaussian costs) and the uniform
    initializer ``tau0``; small ``margin`` probes the steep region near the
    boundary. For each pair ``(x, x')`` and ``gamma ~ U(0, 1]`` the quantity
    ``2/gamma^2 (L(y) - L(x) - <y - x, grad L(x)>)`` is evaluated at
    ``y = x + gamma (x' - x)`` and the maximum is returned.
    """
    if not 0 < margin <= 1:
        raise ValueError("margin must lie in (0, 1]")
    lam = _check_lam(lam)
    map_solver = map_solver or linear_minimizer
    rng = np.random.default_rng(seed)
    tau0 = _initial_tau(data, None)

    def probe():
        v = np.array([_solve(map_solver, mdl, rng.normal(size=mdl.dim), m)[0]
                      for m, mdl in enumerate(data.models)])
        return (1 - margin) * v + margin * tau0

    best = 0.0
    for _ in range(n_probes):
        x, x2 = probe(), probe()
        gamma = 1.0 - rng.uniform()  # (0, 1]
        y = x + gamma * (x2 - x)
        lx = dual_objective(x, data, lam, rho)
        ly = dual_objective(y, data, lam, rho)
        g = grad_dual(x, data, lam, rho)
        val = 2.0 / gamma ** 2 * (ly - lx - float(np.sum((y - x) * g)))
        best = max(best, val)
    return best


__all__ = [
    "FWConfig", "FWTrace", "FWResult", "InferenceResult", "fw_learn", "bcfw_learn",
    "fw_infer", "line_search", "duality_gap", "decay_step", "curvature_bound_estimate",
    "BOUNDARY_EPS",
]
