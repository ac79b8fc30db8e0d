"""JSON and CSV readers/writers for datasets, parameters, marginals and traces.

Dataset JSON
------------
Common keys: ``kind`` (``bipartite_matching``, ``general_matching`` or
``pairwise_binary_grid``) and ``samples``. Feature maps are given once at the
top level and shared by every sample, or per sample as a list under
``sample_features`` (same keys as the top level).

``bipartite_matching``
    ``n``, ``perfect`` (default true), ``features``: ``(K, n, n)`` nested
    array or the string ``"indicator"``; samples are permutations
    (``-1`` marks an unmatched row).
``general_matching``
    ``n_nodes``, ``edges`` (list of pairs), ``perfect``, ``features``:
    ``(K, E)`` in ``edges`` order; samples are lists of matched pairs.
``pairwise_binary_grid``
    ``n_nodes``, ``edges``, optional ``shape``, ``node_features`` ``(N, C)``,
    ``edge_features`` ``(E, D)``; samples are 0/1 label lists.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .exceptions import StructureError
from .models import (BIPARTITE, GENERAL, GRID, BipartiteMatching, Dataset,
                     GeneralMatching, PairwiseBinaryGrid)

TRACE_COLUMNS = ("t", "objective", "gap", "gamma", "seconds")


def _is_indicator(model: BipartiteMatching):
    n = model.n
    return model.n_features == n * n and np.array_equal(
        model.features, np.eye(n * n).reshape(n * n, n, n))


def _feature_dict(model):
    if isinstance(model, BipartiteMatching):
        return {"features": "indicator" if _is_indicator(model) else model.features.tolist()}
    if isinstance(model, GeneralMatching):
        return {"features": model.features.tolist()}
    return {"node_features": model.node_features.tolist(),
            "edge_features": model.edge_features.tolist()}


def _topology_dict(model):
    if isinstance(model, BipartiteMatching):
        return {"kind": BIPARTITE, "n": model.n, "perfect": model.perfect}
    if isinstance(model, GeneralMatching):
        return {"kind": GENERAL, "n_nodes": model.n_nodes, "edges": model.edges.tolist(),
                "perfect": model.perfect}
    d = {"kind": GRID, "n_nodes": model.n_nodes, "edges": model.edges.tolist()}
    if model.shape is not None:
        d["shape"] = list(model.shape)
    return d


def model_to_dict(model) -> dict:
    d = _topology_dict(model)
    d.update(_feature_dict(model))
    return d


def model_from_dict(d: dict, features: dict | None = None):
    """Build a model from its topology keys and (possibly overriding) feature keys."""
    f = d if features is None else features
    kind = d.get("kind")
    try:
        if kind == BIPARTITE:
            n = int(d["n"])
            perfect = bool(d.get("perfect", True))
            if f.get("features", "indicator") == "indicator":
                return BipartiteMatching.indicator(n, perfect)
            model = BipartiteMatching(f["features"], perfect)
            if model.n != n:
                raise StructureError(f"features are {model.n} x {model.n}, expected n = {n}")
            return model
        if kind == GENERAL:
            return GeneralMatching(d["n_nodes"], d["edges"], f["features"],
                                   bool(d.get("perfect", True)))
        if kind == GRID:
            return PairwiseBinaryGrid(d["n_nodes"], d["edges"], f["node_features"],
                                      f["edge_features"], d.get("shape"))
    except KeyError as exc:
        raise StructureError(f"missing key {exc.args[0]!r} for kind {kind!r}") from exc
    raise StructureError(f"unknown model kind {kind!r}")


def _sample_to_json(model, raw):
    if isinstance(model, GeneralMatching):
        return [[int(i), int(j)] for i, j in raw]
    return np.asarray(raw, dtype=int).tolist()


def dataset_to_dict(data: Dataset) -> dict:
    if data.M == 0:
        raise StructureError("cannot serialize an empty dataset")
    d = _topology_dict(data.model)
    if all(m is data.model for m in data.models):
        d.update(_feature_dict(data.model))
    else:
        d["sample_features"] = [_feature_dict(m) for m in data.models]
    d["samples"] = [_sample_to_json(m, r) for m, r in zip(data.models, data.raw)]
    return d


def dataset_from_dict(d: dict) -> Dataset:
    samples = d.get("samples")
    if not samples:
        raise StructureError("dataset has no samples")
    if "sample_features" in d:
        feats = d["sample_features"]
        if len(feats) != len(samples):
            raise StructureError("sample_features and samples differ in length")
        models = [model_from_dict(d, f) for f in feats]
    else:
        models = [model_from_dict(d)] * len(samples)
    if isinstance(models[0], GeneralMatching):
        samples = [[tuple(p) for p in s] for s in samples]
    return Dataset.from_observations(models, samples)


def _dump(obj, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


def _load(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise StructureError(f"{path}: invalid JSON ({exc})") from exc


def write_dataset(data: Dataset, path):
    return _dump(dataset_to_dict(data), path)


def read_dataset(path) -> Dataset:
    return dataset_from_dict(_load(path))


def write_theta(path, theta, **meta):
    """Parameter file: ``{"theta": [...], ...meta}``."""
    d = {"theta": np.asarray(theta, dtype=float).tolist()}
    d.update(meta)
    return _dump(d, path)


def read_theta(path):
    d = _load(path)
    if "theta" not in d:
        raise StructureError(f"{path}: no 'theta' entry")
    return np.asarray(d["theta"], dtype=float), {k: v for k, v in d.items() if k != "theta"}


def write_json(path, obj):
    return _dump(obj, path)


def read_json(path):
    return _load(path)


def write_trace_csv(trace, path):
    """One row per recorded iterate with columns ``t, objective, gap, gamma, seconds``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for row in trace:
            writer.writerow([int(row.t)] + [repr(float(v)) for v in
                                            (row.objective, row.gap, row.gamma, row.seconds)])
    return path


def read_trace_csv(path):
    """Rows as dicts with ``t`` as int and the rest as floats."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "t" else float(v)) for k, v in r.items()} for r in rows]
