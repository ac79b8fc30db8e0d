"""Closed-form parameter map, dual objective and its gradient.

For pseudomarginals ``tau`` of shape ``(M, dim)`` the optimal parameters are
``theta*(tau) = r / lam`` with the moment residual

    r = sum_m Phi_m^T (y_m - tau_m),

and the dual objective is ``L(tau) = |r|^2 / (2 lam) - sum_m H_rho(tau_m)``.
Everything downstream (Frank-Wolfe, line search) touches the features only
through ``r`` and products ``Phi_m^T d``, which :class:`GramCache` maintains.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import StructureError
from .free_energy import energy, entropy, grad_entropy
from .models import Dataset


def _check_lam(lam):
    if not lam > 0:
        raise StructureError(f"regularizer lambda must be positive, got {lam}")
    return float(lam)


def _check_tau_all(tau_all, data: Dataset):
    tau_all = np.asarray(tau_all, dtype=float)
    if tau_all.shape != data.observations.shape:
        raise StructureError(
            f"pseudomarginals have shape {tau_all.shape}, expected {data.observations.shape}")
    return tau_all


def moment_residual(tau_all, data: Dataset):
    """``sum_m (phi(X_m, Y_m) - E_tau_m[phi])``."""
    tau_all = _check_tau_all(tau_all, data)
    return data.empirical_features - data.pullback(tau_all)


def theta_star(tau_all, data: Dataset, lam: float):
    """Maximizer over ``theta`` of the saddle function for fixed ``tau``."""
    lam = _check_lam(lam)
    return moment_residual(tau_all, data) / lam


def dual_objective(tau_all, data: Dataset, lam: float, rho=None, residual=None):
    """``L(tau) = |r|^2 / (2 lam) - sum_m H_rho(tau_m)``."""
    lam = _check_lam(lam)
    tau_all = _check_tau_all(tau_all, data)
    r = moment_residual(tau_all, data) if residual is None else residual
    return float(r @ r / (2 * lam) - np.sum(entropy(data.model, tau_all, rho)))


def saddle_objective(tau_all, theta, data: Dataset, lam: float, rho=None):
    """The regularized surrogate likelihood before maximizing out ``theta``.

    ``sum_m [<phi(Y_m), theta> + F_rho(tau_m; theta)] - lam/2 |theta|^2``, built
    from the energy and entropy of each sample separately.
    """
    lam = _check_lam(lam)
    tau_all = _check_tau_all(tau_all, data)
    theta = np.asarray(theta, dtype=float)
    total = 0.0
    for m, model in enumerate(data.models):
        score_obs = float(data.observations[m] @ model.scores(theta))
        f = float(energy(model, tau_all[m], theta)) - float(entropy(model, tau_all[m], rho))
        total += score_obs + f
    return total - 0.5 * lam * float(theta @ theta)


def grad_dual(tau_all, data: Dataset, lam: float, rho=None, cache: "GramCache | None" = None):
    """Per-sample gradient ``-Phi_m theta* - grad H_rho(tau_m)``, shape ``(M, dim)``."""
    lam = _check_lam(lam)
    tau_all = _check_tau_all(tau_all, data)
    r = cache.residual if cache is not None else moment_residual(tau_all, data)
    quad = -data.pushforward(r) / lam
    return quad - grad_entropy(data.model, tau_all, rho)


def grad_dual_block(m, tau_m, data: Dataset, lam: float, residual, rho=None):
    """Gradient for one sample only (block-coordinate steps)."""
    model = data.models[m]
    return -(model.feature_matrix @ residual) / lam - grad_entropy(model, tau_m, rho)


class GramCache:
    """Running moment residual ``r`` for a set of pseudomarginals.

    The cache owns the ``(M, dim)`` array ``tau``. Block updates adjust ``r`` in
    ``O(dim * K)`` for the touched sample; every ``refresh_every`` updates the
    residual is recomputed from scratch and the observed drift is recorded in
    ``last_drift``.
    """

    def __init__(self, data: Dataset, tau_all, refresh_every: int = 1000):
        self.data = data
        self.tau = np.array(_check_tau_all(tau_all, data), dtype=float)
        self.refresh_every = int(refresh_every)
        self.updates = 0
        self.last_drift = 0.0
        self.residual = moment_residual(self.tau, data)

    def direction_product(self, direction, m=None):
        """``sum_m Phi_m^T d_m`` for a full ``(M, dim)`` direction, or ``Phi_m^T d``."""
        if m is None:
            return self.data.pullback(direction)
        return direction @ self.data.models[m].feature_matrix

    def step_all(self, gamma, direction, product=None):
        """Batch move ``tau <- tau + gamma * direction``."""
        q = self.direction_product(direction) if product is None else product
        self.tau += gamma * direction
        self.residual = self.residual - gamma * q

    def update(self, m, new_tau_m):
        """Replace sample ``m`` and adjust the residual incrementally."""
        new_tau_m = np.asarray(new_tau_m, dtype=float)
        delta = new_tau_m - self.tau[m]
        if np.any(delta):
            self.residual = self.residual - self.direction_product(delta, m)
        self.tau[m] = new_tau_m
        self.updates += 1
        if self.refresh_every and self.updates % self.refresh_every == 0:
            self.refresh()
        return self

    def refresh(self):
        fresh = moment_residual(self.tau, self.data)
        self.last_drift = float(np.max(np.abs(fresh - self.residual), initial=0.0))
        self.residual = fresh
        return self.last_drift


def update_gram_residual(cache: GramCache, m, old_tau_m, new_tau_m) -> GramCache:
    """Functional form of :meth:`GramCache.update`; checks ``old_tau_m`` is current."""
    if not np.array_equal(np.asarray(old_tau_m, dtype=float), cache.tau[m]):
        raise StructureError(f"stale pseudomarginals for sample {m}")
    return cache.update(m, new_tau_m)


@dataclass(frozen=True)
class LineSearchTerms:
    """Scalars of the quadratic part of ``h(eta) = L(tau + eta (s - tau))``.

    With ``q = sum_m Phi_m^T (tau_m - s_m)``: ``a = |q|^2``, ``b = r . q`` and
    ``c = |r|^2``, so the quadratic part is ``(c + 2 eta b + eta^2 a) / (2 lam)``.
    """

    a: float
    b: float
    c: float
    lam: float

    @classmethod
    def from_cache(cls, cache: GramCache, s_all, lam, m=None):
        if m is None:
            q = cache.direction_product(cache.tau - s_all)
        else:
            q = cache.direction_product(cache.tau[m] - s_all, m)
        r = cache.residual
        return cls(float(q @ q), float(r @ q), float(r @ r), float(lam))

    def quadratic(self, eta):
        return (self.c + 2 * eta * self.b + eta * eta * self.a) / (2 * self.lam)

    def quadratic_slope(self, eta):
        return (self.b + eta * self.a) / self.lam


def line_objective(terms: LineSearchTerms, model, tau, s, eta, rho=None):
    """``h(eta)`` from the precomputed scalars plus one entropy evaluation."""
    point = (1 - eta) * np.asarray(tau) + eta * np.asarray(s)
    return terms.quadratic(eta) - float(np.sum(entropy(model, point, rho)))
