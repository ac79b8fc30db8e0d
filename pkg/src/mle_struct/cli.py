"""Command-line entry point ``mle-struct``.

Every subcommand takes a JSON config file; relative paths inside it are
resolved against the directory of the config file. Keys:

``kind``            model kind for synthesized data (bipartite only)
``regime``          ``"high"``, ``"low"`` or ``"custom"`` (with ``W``)
``n``, ``M``        sizes for ``synth``
``W``               custom weight matrix (nested list or path)
``dataset``         dataset JSON (``learn``, ``sandwich``, optional for ``infer``/``map``)
``model``           model JSON or inline dict (``infer``, ``map``)
``theta``           parameter JSON (``infer``, ``map``)
``reference``       reference structure for the Hamming loss of ``map``
``rho``             number, list, or path to a JSON list of per-factor weights
``lam``             regularization weight
``fw``              dict of :class:`~mle_struct.frank_wolfe.FWConfig` fields
``infer_fw``        FWConfig fields used for inference inside ``sandwich``
``closeness``       threshold on ``upper - lower`` reported by ``sandwich``
``seed``, ``out``   RNG seed and output directory

Exit codes: 0 success, 2 usage error, 3 infeasible model, 4 invariant
violation (including a failed sandwich check), 1 any other solver failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .exact import MAX_RYSER_PARTITION, learn_sandwich
from .exceptions import (InfeasibleModelError, InvariantViolation, MLEStructError,
                         SizeLimitError, StructureError)
from .frank_wolfe import FWConfig, fw_infer, fw_learn
from .map_solvers import map_decode
from .models import BipartiteMatching, Dataset, GeneralMatching
from .synth import REGIME_OFF_DIAGONAL, make_synthetic, regime_weights

log = logging.getLogger("mle_struct")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_INVARIANT = 0, 1, 2, 3, 4
COMMANDS = ("synth", "learn", "infer", "sandwich", "map")
MAX_SYNTH_N = 10


class UsageError(MLEStructError):
    """Bad or inconsistent configuration."""


@dataclasses.dataclass
class ExperimentConfig:
    kind: str = "bipartite_matching"
    regime: str = "high"
    n: int = 10
    M: int = 100
    W: object = None
    dataset: Path | None = None
    model: object = None
    theta: Path | None = None
    reference: object = None
    rho: object = 1.0
    lam: float = 1.0
    fw: dict = dataclasses.field(default_factory=dict)
    infer_fw: dict = dataclasses.field(default_factory=dict)
    closeness: float | None = None
    seed: int = 0
    out: Path = Path("out")
    base: Path = Path(".")

    @classmethod
    def load(cls, path, seed=None, threads=None, out=None):
        path = Path(path)
        if not path.is_file():
            raise UsageError(f"config file {path} does not exist")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise UsageError("config must be a JSON object")
        names = {f.name for f in dataclasses.fields(cls)} - {"base"}
        unknown = set(raw) - names
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**raw)
        cfg.base = path.parent
        cfg.out = Path(out) if out is not None else cfg.base / cfg.out
        if seed is not None:
            cfg.seed = seed
        if threads is not None:
            cfg.fw = {**cfg.fw, "n_jobs": threads}
        return cfg

    def path(self, value, what):
        p = Path(value)
        p = p if p.is_absolute() else self.base / p
        if not p.exists():
            raise UsageError(f"{what} file {p} does not exist")
        return p

    def fw_config(self, overrides=None):
        fields = {"rng_seed": self.seed, **self.fw, **(overrides or {})}
        try:
            return FWConfig(**fields)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad FW settings: {exc}") from exc

    def load_dataset(self) -> Dataset:
        if self.dataset is None:
            raise UsageError("config needs a 'dataset' entry")
        return io.read_dataset(self.path(self.dataset, "dataset"))

    def load_model(self):
        if isinstance(self.model, dict):
            return io.model_from_dict(self.model)
        if self.model is not None:
            return io.model_from_dict(io.read_json(self.path(self.model, "model")))
        if self.dataset is not None:
            return self.load_dataset().model
        raise UsageError("config needs a 'model' or 'dataset' entry")

    def load_theta(self, model):
        if self.theta is None:
            raise UsageError("config needs a 'theta' entry")
        theta, _ = io.read_theta(self.path(self.theta, "theta"))
        if theta.shape != (model.n_features,):
            raise UsageError(f"theta has {theta.size} entries, model has {model.n_features} features")
        return theta

    def load_rho(self):
        rho = self.rho
        if isinstance(rho, str):
            rho = io.read_json(self.path(rho, "rho"))
        if isinstance(rho, list):
            return np.asarray(rho, dtype=float)
        return float(rho)

    def weights(self):
        if self.regime == "custom":
            if self.W is None:
                raise UsageError("regime 'custom' needs a 'W' entry")
            W = io.read_json(self.path(self.W, "W")) if isinstance(self.W, str) else self.W
            W = np.asarray(W, dtype=float)
            if W.ndim != 2 or W.shape[0] != W.shape[1]:
                raise UsageError("W must be a square matrix")
            return W
        if self.regime not in REGIME_OFF_DIAGONAL:
            raise UsageError(f"unknown regime {self.regime!r}")
        return regime_weights(self.regime, self.n)


def _synthesize(cfg: ExperimentConfig) -> Dataset:
    if cfg.kind != "bipartite_matching":
        raise UsageError("synthetic data is only available for bipartite matchings")
    if cfg.M < 1:
        raise UsageError("M must be at least 1")
    W = cfg.weights()
    if W.shape[0] > MAX_SYNTH_N:
        raise SizeLimitError(f"exact sampling is capped at n = {MAX_SYNTH_N}, got {W.shape[0]}")
    return make_synthetic(W, cfg.M, cfg.seed)


def cmd_synth(cfg: ExperimentConfig):
    data = _synthesize(cfg)
    path = io.write_dataset(data, cfg.out / "dataset.json")
    print(f"wrote {data.M} samples to {path}")
    return EXIT_OK


def cmd_learn(cfg: ExperimentConfig):
    data = cfg.load_dataset()
    rho = cfg.load_rho()
    res = fw_learn(data, rho, cfg.lam, cfg.fw_config())
    io.write_theta(cfg.out / "theta.json", res.theta, gap=res.gap, converged=res.converged,
                   iterations=res.iterations, objective=res.objective, lam=cfg.lam,
                   rho=rho.tolist() if isinstance(rho, np.ndarray) else rho)
    io.write_trace_csv(res.trace, cfg.out / "trace.csv")
    print(f"learn: objective {res.objective:.10g} gap {res.gap:.3g} "
          f"iterations {res.iterations} converged {res.converged}")
    return EXIT_OK


def cmd_infer(cfg: ExperimentConfig):
    model = cfg.load_model()
    theta = cfg.load_theta(model)
    res = fw_infer(model, theta, cfg.load_rho(), cfg.fw_config())
    io.write_json(cfg.out / "marginals.json", {
        "tau": res.tau.tolist(), "log_z": res.log_z, "gap": res.gap,
        "converged": res.converged, "iterations": res.iterations})
    io.write_trace_csv(res.trace, cfg.out / "infer_trace.csv")
    print(f"infer: log Z {res.log_z:.10g} gap {res.gap:.3g} iterations {res.iterations}")
    return EXIT_OK


def cmd_sandwich(cfg: ExperimentConfig):
    data = cfg.load_dataset() if cfg.dataset is not None else _synthesize(cfg)
    if data.M == 0:
        raise UsageError("sandwich needs at least one sample")
    if not isinstance(data.model, BipartiteMatching) or data.model.n > MAX_RYSER_PARTITION:
        raise UsageError("sandwich needs bipartite matchings small enough for exact likelihoods")
    infer = cfg.fw_config({"max_iters": 5000, "gap_tol": 1e-9, **cfg.infer_fw, "mode": "batch"})
    report, bethe, rw = learn_sandwich(data, cfg.lam, cfg.fw_config(), infer)
    out = report.to_dict()
    if cfg.closeness is not None:
        spread = report.upper - report.lower
        out["closeness"] = {"spread": spread, "threshold": cfg.closeness,
                            "close": bool(spread <= cfg.closeness)}
    io.write_json(cfg.out / "sandwich.json", out)
    io.write_theta(cfg.out / "theta_bethe.json", bethe.theta, gap=bethe.gap, rho=1.0)
    io.write_theta(cfg.out / "theta_rw.json", rw.theta, gap=rw.gap, rho=0.5)
    for c in report.checks:
        print(f"{'PASS' if c.ok else 'FAIL'} {c.name}: {c.lhs:.8g} <= {c.rhs:.8g} + {c.slack:.2g}")
    print(f"sandwich: lower {report.lower:.8g} exact {report.exact:.8g} upper {report.upper:.8g}")
    return EXIT_OK if report.ok else EXIT_INVARIANT


def _structure_json(model, structure):
    if isinstance(model, GeneralMatching):
        return [[int(i), int(j)] for i, j in structure]
    return np.asarray(structure, dtype=int).tolist()


def cmd_map(cfg: ExperimentConfig):
    model = cfg.load_model()
    theta = cfg.load_theta(model)
    sol = map_decode(model, theta)
    structure = model.decode(sol.vertex)
    out = {"structure": _structure_json(model, structure), "objective": float(sol.objective),
           "exact": bool(sol.exact)}
    if cfg.reference is not None:
        ref = cfg.reference
        if isinstance(ref, str):
            ref = io.read_json(cfg.path(ref, "reference"))
            ref = ref["structure"] if isinstance(ref, dict) else ref
        if isinstance(model, GeneralMatching):
            ref = [tuple(p) for p in ref]
        out["hamming"] = model.hamming(structure, ref)
    io.write_json(cfg.out / "map.json", out)
    print(f"map: score {out['objective']:.10g}" + (f" hamming {out['hamming']:.4g}" if "hamming" in out else ""))
    return EXIT_OK


HANDLERS = {"synth": cmd_synth, "learn": cmd_learn, "infer": cmd_infer,
            "sandwich": cmd_sandwich, "map": cmd_map}


def _exit_code(exc):
    while exc is not None:
        if isinstance(exc, InfeasibleModelError):
            return EXIT_INFEASIBLE
        if isinstance(exc, InvariantViolation):
            return EXIT_INVARIANT
        if isinstance(exc, (UsageError, StructureError, SizeLimitError, FileNotFoundError)):
            return EXIT_USAGE
        exc = exc.__cause__
    return EXIT_ERROR


def build_parser():
    p = argparse.ArgumentParser(prog="mle-struct",
                                description="Frank-Wolfe surrogate likelihood estimation.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--threads", type=int, default=None, help="cap on MAP worker threads")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = ExperimentConfig.load(args.config, args.seed, args.threads, args.out)
        return HANDLERS[args.command](cfg)
    except (MLEStructError, FileNotFoundError, ValueError) as exc:
        code = _exit_code(exc)
        if code == EXIT_ERROR and isinstance(exc, ValueError):
            code = EXIT_USAGE
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
