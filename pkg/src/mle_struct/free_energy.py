"""Reweighted energies, entropies and free energies with analytic gradients.

All functions accept pseudomarginals with arbitrary leading axes
(``(..., model.dim)``) so that a whole batch of samples sharing one topology is
evaluated at once. ``0 log 0`` is taken as ``0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DomainError, GradientUndefinedError, StructureError
from .models import (BipartiteMatching, GeneralMatching, PairwiseBinaryGrid,
                     StructuredModel)

# rounding slack tolerated on quantities that are nonnegative in exact arithmetic
_NEG_TOL = 1e-12


@dataclass(frozen=True)
class FreeEnergyValue:
    energy: float
    entropy: float
    total: float


def xlogx(x):
    """Elementwise ``x log x`` with ``0 log 0 = 0``; negative input is a domain error."""
    x = np.asarray(x, dtype=float)
    if np.any(x < -_NEG_TOL) or np.any(np.isnan(x)):
        raise DomainError("x log x evaluated at a negative argument")
    x = np.clip(x, 0.0, None)
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = x[pos] * np.log(x[pos])
    return out


def energy(model: StructuredModel, tau, theta):
    """``E(tau; theta) = -<scores, tau>``, the negated expected score."""
    tau = model.check_tau(tau)
    return -(tau @ model.scores(theta))


# --------------------------------------------------------------------------
# matchings
# --------------------------------------------------------------------------

def _matching_parts(model, tau, rho):
    """Edge coefficients ``rho_i + rho_j - 1``, free mask and node slacks."""
    ends = model.edge_nodes
    coef = rho[ends[:, 0]] + rho[ends[:, 1]] - 1.0
    mask = model.free_mask
    slack = None
    if not model.perfect:
        if isinstance(model, BipartiteMatching):
            T = tau.reshape(tau.shape[:-1] + (model.n, model.n))
            deg = np.concatenate([T.sum(-1), T.sum(-2)], axis=-1)
        else:
            deg = model.degree_sums(tau)
        slack = 1.0 - deg
    return coef, mask, slack


def entropy_rw_matching(model, tau, rho=None):
    """Reweighted matching entropy over per-edge probabilities.

    ``sum_e [(rho_i + rho_j - 1)(1 - t_e) log(1 - t_e) - t_e log t_e]``
    minus ``sum_v rho_v s_v log s_v`` for the node slacks ``s_v`` of imperfect
    matchings. Clamped edges are left out. Perfect matchings have zero slack
    by construction, so the slack term is dropped for them.
    """
    if not isinstance(model, (BipartiteMatching, GeneralMatching)):
        raise StructureError("matching entropy needs a matching model")
    tau = model.check_tau(tau)
    rho = model.rho_vector(rho)
    if np.any(tau > 1 + _NEG_TOL):
        raise DomainError("matching pseudomarginals must lie in [0, 1]")
    coef, mask, slack = _matching_parts(model, tau, rho)
    t = tau[..., mask]
    h = np.sum(coef[mask] * xlogx(1.0 - t) - xlogx(t), axis=-1)
    if slack is not None:
        h = h - np.sum(rho * xlogx(slack), axis=-1)
    return h


def _matching_gradient_fn(model, rho):
    ends = model.edge_nodes
    coef = rho[ends[:, 0]] + rho[ends[:, 1]] - 1.0
    mask = model.free_mask
    coef_free = coef[mask]
    all_free = bool(np.all(mask))
    bip = isinstance(model, BipartiteMatching)

    def grad(tau):
        t = tau if all_free else tau[..., mask]
        if np.any(t <= 0) or np.any(t >= 1):
            raise GradientUndefinedError("entropy gradient undefined at 0/1 edge marginals")
        g_free = -coef_free * (1 + np.log1p(-t)) - (1 + np.log(t))
        if all_free:
            g = g_free
        else:
            g = np.zeros_like(tau)
            g[..., mask] = g_free
        if model.perfect:
            return g
        if bip:
            T = tau.reshape(tau.shape[:-1] + (model.n, model.n))
            deg = np.concatenate([T.sum(-1), T.sum(-2)], axis=-1)
        else:
            deg = model.degree_sums(tau)
        slack = 1.0 - deg
        if np.any(slack <= 0):
            raise GradientUndefinedError("entropy gradient undefined at zero node slack")
        node_term = rho * (1 + np.log(slack))
        g = g + node_term[..., ends[:, 0]] + node_term[..., ends[:, 1]]
        g[..., ~mask] = 0.0
        return g

    return grad


# --------------------------------------------------------------------------
# pairwise binary grids
# --------------------------------------------------------------------------

def node_counting_weights(model: PairwiseBinaryGrid, rho):
    """``1 - sum_{e ~ n} rho_e`` per node."""
    acc = np.zeros(model.n_nodes)
    np.add.at(acc, model.edges[:, 0], rho)
    np.add.at(acc, model.edges[:, 1], rho)
    return 1.0 - acc


def entropy_rw_grid(model: PairwiseBinaryGrid, tau, rho=None):
    """Reweighted entropy in the regrouped (counting-number) form.

    ``sum_n (1 - sum_{e ~ n} rho_e) H(mu_n) + sum_e rho_e H(mu_e)``. It agrees
    with :func:`entropy_rw_grid_mutual_info` on the local polytope only.
    """
    if not isinstance(model, PairwiseBinaryGrid):
        raise StructureError("grid entropy needs a PairwiseBinaryGrid")
    tau = model.check_tau(tau)
    rho = model.rho_vector(rho)
    node, edge = model.split(tau)
    w = node_counting_weights(model, rho)
    h_node = -xlogx(node).sum(-1)
    h_edge = -xlogx(edge).sum((-1, -2))
    return np.sum(w * h_node, -1) + np.sum(rho * h_edge, -1)


def entropy_rw_grid_mutual_info(model: PairwiseBinaryGrid, tau, rho=None):
    """Node entropies minus ``rho``-weighted edge mutual informations."""
    tau = model.check_tau(tau)
    rho = model.rho_vector(rho)
    node, edge = model.split(tau)
    h = -xlogx(node).sum((-1, -2))
    if model.n_edges == 0:
        return h
    i, j = model.edges[:, 0], model.edges[:, 1]
    prod = node[..., i, :, None] * node[..., j, None, :]
    pos = edge > 0
    ratio = np.where(pos, edge / np.where(prod > 0, prod, 1.0), 1.0)
    if np.any(pos & (prod <= 0)):
        raise DomainError("edge marginal is positive where a node marginal vanishes")
    mi = np.sum(np.where(pos, edge * np.log(ratio), 0.0), axis=(-1, -2))
    return h - np.sum(rho * mi, -1)


def _grid_gradient_fn(model, rho):
    w = node_counting_weights(model, rho)
    coef = np.concatenate([np.repeat(w, 2), np.repeat(rho, 4)])

    def grad(tau):
        if np.any(tau <= 0):
            raise GradientUndefinedError("entropy gradient undefined at zero grid marginals")
        return -coef * (1 + np.log(tau))

    return grad


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------

def entropy(model: StructuredModel, tau, rho=None):
    """Reweighted entropy ``H_rho(tau)`` for any supported model."""
    if isinstance(model, PairwiseBinaryGrid):
        return entropy_rw_grid(model, tau, rho)
    return entropy_rw_matching(model, tau, rho)


def entropy_gradient_fn(model: StructuredModel, rho=None):
    """Return ``tau -> grad H_rho(tau)`` with the model-dependent pieces precomputed.

    Used by line searches that evaluate the gradient many times along one
    segment; the returned function skips shape checks.
    """
    rho = model.rho_vector(rho)
    if isinstance(model, PairwiseBinaryGrid):
        return _grid_gradient_fn(model, rho)
    if isinstance(model, (BipartiteMatching, GeneralMatching)):
        return _matching_gradient_fn(model, rho)
    raise StructureError(f"no entropy for {model!r}")


def grad_entropy(model: StructuredModel, tau, rho=None):
    """Analytic gradient of :func:`entropy` with respect to ``tau``.

    Clamped coordinates get a zero gradient. Raises
    :class:`GradientUndefinedError` on the boundary of the polytope.
    """
    tau = model.check_tau(tau)
    return entropy_gradient_fn(model, rho)(tau)


def free_energy(model: StructuredModel, tau, theta, rho=None) -> FreeEnergyValue:
    """``F_rho = E - H_rho`` for a single pseudomarginal vector."""
    e = float(energy(model, tau, theta))
    h = float(entropy(model, tau, rho))
    return FreeEnergyValue(e, h, e - h)


def free_energy_value(model, tau, theta, rho=None):
    """Vectorized total free energy (no bookkeeping object)."""
    return energy(model, tau, theta) - entropy(model, tau, rho)


def grad_free_energy(model, tau, theta, rho=None):
    return -model.scores(theta) - grad_entropy(model, tau, rho)
