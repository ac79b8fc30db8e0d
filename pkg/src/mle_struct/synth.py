"""Synthetic bipartite matching data with known generating weights."""

from __future__ import annotations

import numpy as np

from .exact import sample_matchings
from .exceptions import StructureError
from .models import BipartiteMatching, Dataset

HIGH_SNR = "high"
LOW_SNR = "low"

#: off-diagonal weight of each regime; the diagonal is 0
REGIME_OFF_DIAGONAL = {HIGH_SNR: -2.0, LOW_SNR: -0.5}


def regime_weights(regime: str, n: int) -> np.ndarray:
    """``n x n`` weight matrix with zero diagonal and a constant off-diagonal."""
    if regime not in REGIME_OFF_DIAGONAL:
        raise StructureError(f"unknown regime {regime!r}; use one of {sorted(REGIME_OFF_DIAGONAL)}")
    W = np.full((n, n), REGIME_OFF_DIAGONAL[regime])
    np.fill_diagonal(W, 0.0)
    return W


def make_synthetic(W, M: int, seed=None, features=None):
    """Draw ``M`` exact samples from ``p(Y) ∝ exp(<W, Y>)``.

    Parameters
    ----------
    W : array_like or str
        Weight matrix, or a regime name (``"high"``/``"low"``) combined with
        ``features`` giving ``n`` via its shape, see :func:`synthetic_dataset`.
    M : int
    seed : int or Generator, optional
    features : array_like, optional
        ``(K, n, n)`` feature matrices of the returned model; indicator
        features (one per edge, so ``theta`` is ``W.ravel()``) by default.

    Returns
    -------
    Dataset
    """
    W = np.asarray(W, dtype=float)
    n = W.shape[0]
    model = BipartiteMatching.indicator(n) if features is None else BipartiteMatching(features)
    if model.n != n:
        raise StructureError("features do not match the size of W")
    perms = sample_matchings(W, M, seed)
    return Dataset.shared(model, [p for p in perms])


def synthetic_dataset(regime: str, n: int, M: int, seed=None):
    """Dataset of a named regime plus its generating weights."""
    W = regime_weights(regime, n)
    return make_synthetic(W, M, seed), W
