"""Config-driven experiment runner.

A config is a TOML document with top-level ``kind``, ``seed`` and
``output`` keys plus parameter tables. Every run writes its CSV artifacts
and a ``manifest.json`` listing each file with its SHA-256.
"""
import hashlib
import json
import os
import re
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .datasets import KINDS as DATASET_KINDS
from .datasets import make_dataset
from .equipartition import energy_table_from_fixed_points, solve_gamma
from .geco import ConstraintSpec
from .io import write_csv
from .lipschitz import LipschitzSpec, fixed_point_diameter, projected_iterate, write_trajectory_csv
from .phase import BetaSweepConfig, sweep, write_sweep_csv
from .seeds import derive_seed
from .tiling import IterationConfig, LatentGrid, count_distinct_fixed_points, objective_terms, smoothed_iterate
from .training import TrainConfig, train
from .vae import GaussianVae, average_kl, gaussian_nll_per_dim, marginal_kl, save_checkpoint, sigma_opt

EXPERIMENT_KINDS = (
    "fixed-points",
    "phase-sweep",
    "lipschitz",
    "equipartition",
    "elbo-train",
    "geco-train",
    "diagnostics",
)

_REQUIRED = {
    "fixed-points": ("dataset", "grid", "iteration"),
    "phase-sweep": ("dataset", "grid", "iteration", "sweep"),
    "lipschitz": ("dataset", "grid", "iteration", "lipschitz"),
    "equipartition": ("dataset", "grid", "iteration", "equipartition"),
    "elbo-train": ("dataset", "model", "train"),
    "geco-train": ("dataset", "model", "train", "constraints"),
    "diagnostics": ("dataset", "model", "train"),
}

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_PARSE = 2
EXIT_INVALID = 3
EXIT_UNKNOWN_KIND = 4
EXIT_UNWRITABLE = 5


class ExperimentError(Exception):
    code = EXIT_RUNTIME
    name = "runtime-error"

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details

    def record(self):
        return {"error": self.name, "code": self.code, "message": str(self), **self.details}


class ConfigParseError(ExperimentError):
    code, name = EXIT_PARSE, "parse-error"


class InvalidConfigError(ExperimentError):
    code, name = EXIT_INVALID, "invalid-config"


class UnknownKindError(ExperimentError):
    code, name = EXIT_UNKNOWN_KIND, "unknown-kind"


class UnwritableOutputError(ExperimentError):
    code, name = EXIT_UNWRITABLE, "unwritable-output"


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigParseError(f"cannot read config: {exc}", path=str(path)) from exc
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        line, col = _toml_position(exc, text)
        raise ConfigParseError(f"invalid TOML: {exc}", line=line, column=col) from exc


def _toml_position(exc, text):
    lineno = getattr(exc, "lineno", None)
    colno = getattr(exc, "colno", None)
    if lineno is None:
        # older tomli only embeds the position in the message
        m = re.search(r"line (\d+), column (\d+)", str(exc))
        if m:
            lineno, colno = int(m.group(1)), int(m.group(2))
    return lineno, colno


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


# ---- block builders; each raises ValueError/TypeError on bad input ----


def _dataset(cfg):
    block = dict(cfg["dataset"])
    kind = block.pop("kind", None)
    if kind not in DATASET_KINDS:
        raise ValueError(f"kind must be one of {list(DATASET_KINDS)}, got {kind!r}")
    n = block.pop("n", 200)
    seed = block.pop("seed", derive_seed(cfg["seed"], "dataset") % 2**32)
    if "centers" in block:
        block["centers"] = np.asarray(block["centers"], dtype=float)
    return make_dataset(kind, n, seed, **block)


def _grid(cfg):
    return LatentGrid(**cfg["grid"])


def _iteration(cfg, beta=None):
    block = dict(cfg["iteration"])
    block.setdefault("seed", derive_seed(cfg["seed"], "iteration") % 2**32)
    if beta is not None:
        block["beta"] = beta
    if "beta" not in block:
        block["beta"] = 1.0
    return IterationConfig(**block)


def _betas(block):
    if "betas" in block:
        return [float(b) for b in block["betas"]]
    lo, hi = float(block["beta_min"]), float(block["beta_max"])
    if not 0 < lo < hi:
        raise ValueError("need 0 < beta_min < beta_max")
    return list(np.logspace(np.log10(lo), np.log10(hi), int(block.get("num", 16))))


def _sweep(cfg):
    block = dict(cfg["sweep"])
    betas = _betas(block)
    for key in ("betas", "beta_min", "beta_max", "num"):
        block.pop(key, None)
    return BetaSweepConfig(betas=tuple(betas), iteration=_iteration(cfg), **block)


def _merge_radius(cfg):
    r = float(cfg.get("merge_radius", 0.05))
    if not r > 0:
        raise ValueError("merge_radius must be positive")
    return r


def _lipschitz(cfg):
    block = dict(cfg["lipschitz"])
    block.pop("record_trajectory", None)
    return LipschitzSpec(**block)


def _model(cfg, d_x):
    block = dict(cfg["model"])
    block.setdefault("seed", derive_seed(cfg["seed"], "model") % 2**32)
    if "hidden" in block:
        block["hidden"] = tuple(block["hidden"])
    return GaussianVae(d_x, **block)


def _constraints(cfg, image_shape=None):
    out = []
    for k, block in enumerate(cfg.get("constraints", [])):
        block = dict(block)
        if block.get("kind", "RE") != "RE" and "image_shape" not in block:
            block["image_shape"] = image_shape
        try:
            out.append(ConstraintSpec(**block))
        except (TypeError, ValueError) as exc:
            raise ValueError(f"constraints[{k}]: {exc}") from exc
    return tuple(out)


def _train(cfg, image_shape=None, objective=None):
    block = dict(cfg["train"])
    block.setdefault("seed", derive_seed(cfg["seed"], "train") % 2**32)
    if objective is not None:
        block["objective"] = objective
    if block.get("objective", "elbo") == "geco":
        block["constraints"] = _constraints(cfg, image_shape)
    return TrainConfig(**block)


def validate_config(cfg):
    """Schema and range diagnostics; an empty list means the config is valid."""
    diags = []
    kind = cfg.get("kind")
    if kind not in EXPERIMENT_KINDS:
        return [f"kind: unknown experiment kind {kind!r}"]
    if "seed" not in cfg:
        diags.append("seed: missing (a master seed is mandatory)")
    elif not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        diags.append("seed: must be a non-negative integer")
    for block in _REQUIRED[kind]:
        if block not in cfg:
            diags.append(f"{block}: required block missing for kind {kind!r}")
    if diags:
        return diags
    checks = [("dataset", _dataset), ("merge_radius", _merge_radius)]
    if "grid" in _REQUIRED[kind]:
        checks += [("grid", _grid), ("iteration", _iteration)]
    if kind == "phase-sweep":
        checks.append(("sweep", _sweep))
    if kind == "lipschitz":
        checks.append(("lipschitz", _lipschitz))
    if kind == "equipartition":
        checks.append(("equipartition", lambda c: _equipartition_params(c)))
    data = None
    for name, build in checks:
        try:
            out = build(cfg)
            if name == "dataset":
                data = out
        except (TypeError, ValueError, KeyError) as exc:
            diags.append(f"{name}: {exc}")
    if kind in ("elbo-train", "geco-train", "diagnostics") and data is not None:
        objective = "geco" if kind == "geco-train" else None
        try:
            _model(cfg, data.dim)
        except (TypeError, ValueError) as exc:
            diags.append(f"model: {exc}")
        try:
            _constraints(cfg, data.image_shape)
        except ValueError as exc:
            diags.append(str(exc))
        else:
            try:
                _train(cfg, data.image_shape, objective)
            except (TypeError, ValueError) as exc:
                diags.append(f"train: {exc}")
        if kind == "diagnostics":
            try:
                _diagnostics_params(cfg)
            except (TypeError, ValueError) as exc:
                diags.append(f"diagnostics: {exc}")
    return diags


def _equipartition_params(cfg):
    block = dict(cfg["equipartition"])
    beta = float(block.pop("beta", cfg["iteration"].get("beta", 1.0)))
    merge = float(block.pop("merge_radius", 0.05))
    tol = float(block.pop("tol", 1e-10))
    if block:
        raise TypeError(f"unexpected keys {sorted(block)}")
    if not (beta > 0 and merge > 0 and tol > 0):
        raise ValueError("beta, merge_radius and tol must be positive")
    return beta, merge, tol


def _diagnostics_params(cfg):
    block = dict(cfg.get("diagnostics", {}))
    samples = int(block.pop("samples", 10_000))
    if block:
        raise TypeError(f"unexpected keys {sorted(block)}")
    if samples < 100:
        raise ValueError("sample count too small")
    return samples


# ---- runners; each returns {filename: writer} style summaries ----


@dataclass
class RunManifest:
    kind: str
    config_hash: str
    seed: int
    version: str
    files: list = field(default_factory=list)
    wall_clock_seconds: float = 0.0
    summary: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def _run_fixed_points(cfg, out):
    data, grid = _dataset(cfg), _grid(cfg)
    it = _iteration(cfg)
    res = smoothed_iterate(data, grid, it)
    count, labels = count_distinct_fixed_points(res.psi, _merge_radius(cfg))
    d = res.psi.shape[1]
    write_csv(
        out / "fixed_points.csv",
        ["cell", "cluster"] + [f"x{k}" for k in range(d)],
        ((a, labels[a], *res.psi[a]) for a in range(len(res.psi))),
    )
    terms = objective_terms(res.posterior, res.psi, data, grid, it.beta)
    return {
        "converged": res.converged,
        "iterations": res.iterations,
        "cluster_count": count,
        "distortion": terms["distortion"],
        "rate": terms["rate"],
    }


def _run_phase_sweep(cfg, out):
    data, grid = _dataset(cfg), _grid(cfg)
    sc = _sweep(cfg)
    res = sweep(data, grid, sc)
    write_sweep_csv(res, out / "sweep.csv")
    write_csv(out / "critical.csv", ["rank", "beta", "height"], ((k, b, h) for k, (b, h) in enumerate(res.critical)))
    return {
        "num_betas": len(res.records),
        "all_converged": all(r.converged for r in res.records),
        "max_iterations": max(r.iterations for r in res.records),
        "critical_betas": [b for b, _ in res.critical],
    }


def _run_lipschitz(cfg, out):
    data, grid = _dataset(cfg), _grid(cfg)
    spec = _lipschitz(cfg)
    it = replace(_iteration(cfg), record_trajectory=bool(cfg["lipschitz"].get("record_trajectory", True)))
    res = projected_iterate(data, grid, it, spec)
    files = {}
    if res.trajectory is not None:
        write_trajectory_csv(res.trajectory, out / "lipschitz_trajectory.csv")
    count, _ = count_distinct_fixed_points(res.psi, _merge_radius(cfg))
    files.update(
        converged=res.converged,
        iterations=res.iterations,
        diameter=fixed_point_diameter(res.psi),
        cluster_count=count,
    )
    return files


def _run_equipartition(cfg, out):
    data, grid = _dataset(cfg), _grid(cfg)
    beta, merge, tol = _equipartition_params(cfg)
    res = smoothed_iterate(data, grid, _iteration(cfg, beta))
    table, masses, centers = energy_table_from_fixed_points(data, res.psi, beta, merge, grid.prior)
    occ = solve_gamma(table, tol=tol)
    write_csv(out / "gamma.csv", ["cell", "gamma"], enumerate(occ.gamma))
    return {
        "fixed_point_converged": res.converged,
        "num_level_sets": int(len(occ.gamma)),
        "residual": occ.residual,
        "iterations": occ.iterations,
    }


def _trained_model(cfg, objective=None):
    data = _dataset(cfg)
    model = _model(cfg, data.dim)
    tc = _train(cfg, data.image_shape, objective)
    res = train(model, data, tc)
    return data, tc, res


def _run_train(cfg, out, objective):
    data, tc, res = _trained_model(cfg, objective)
    write_csv(out / "trace.csv", res.header, res.trace)
    save_checkpoint(res.model, out / "model.ckpt", {"train_seed": tc.seed, "objective": tc.objective})
    summary = {
        "steps": tc.steps,
        "average_kl": average_kl(res.model, data),
        "sigma_opt": sigma_opt(res.model, data, seed=tc.seed),
        "sigma_x_floor_events": res.model.floor_events,
    }
    if res.state is not None:
        summary["final_c_ma"] = [float(c) for c in res.state.c_ma] if res.state.c_ma is not None else []
        summary["final_b"] = [float(b) for b in res.state.b]
        summary["clamp_events"] = res.state.clamp_events
    return summary


def _run_diagnostics(cfg, out):
    samples = _diagnostics_params(cfg)
    data, tc, res = _trained_model(cfg)
    m = res.model
    mk, se = marginal_kl(m, data, samples, seed=derive_seed(cfg["seed"], "marginal-kl") % 2**32)
    s_opt = sigma_opt(m, data, seed=tc.seed)
    nll = gaussian_nll_per_dim(m, data, seed=tc.seed)
    rows = [
        ("average_kl", average_kl(m, data), 0.0),
        ("marginal_kl", mk, se),
        ("sigma_opt", s_opt, 0.0),
        ("nll_per_dim", nll, 0.0),
    ]
    write_csv(out / "diagnostics.csv", ["metric", "value", "stderr"], rows)
    write_csv(out / "trace.csv", res.header, res.trace)
    return {name: float(v) for name, v, _ in rows}


_RUNNERS = {
    "fixed-points": _run_fixed_points,
    "phase-sweep": _run_phase_sweep,
    "lipschitz": _run_lipschitz,
    "equipartition": _run_equipartition,
    "elbo-train": lambda c, o: _run_train(c, o, "elbo"),
    "geco-train": lambda c, o: _run_train(c, o, "geco"),
    "diagnostics": _run_diagnostics,
}


def resolve_output(cfg, config_path=None):
    """Output directory: ``output`` (default: config file stem) under the root.

    The root is ``$GECOLAB_OUTPUT_ROOT`` when set, else the working directory.
    Absolute ``output`` paths are used as given.
    """
    name = cfg.get("output") or (Path(config_path).stem if config_path else "gecolab-run")
    out = Path(name)
    if not out.is_absolute():
        out = Path(os.environ.get("GECOLAB_OUTPUT_ROOT", ".")) / out
    return out


def _prepare_output(out):
    try:
        out.mkdir(parents=True, exist_ok=True)
        manifest = out / "manifest.json"
        if manifest.exists():
            # files from an earlier run of this directory are replaced
            for entry in json.loads(manifest.read_text()).get("files", []):
                (out / entry["name"]).unlink(missing_ok=True)
            manifest.unlink()
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except (OSError, ValueError) as exc:
        raise UnwritableOutputError(f"output directory not writable: {exc}", path=str(out)) from exc
    leftovers = sorted(p.name for p in out.iterdir())
    if leftovers:
        raise UnwritableOutputError("output directory contains files not owned by a previous run", path=str(out), files=leftovers)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def run_config(cfg, out):
    diags = validate_config(cfg)
    if diags:
        if diags[0].startswith("kind:"):
            raise UnknownKindError(diags[0], kind=cfg.get("kind"))
        raise InvalidConfigError("; ".join(diags), diagnostics=diags)
    out = Path(out)
    _prepare_output(out)
    start = time.perf_counter()
    summary = _RUNNERS[cfg["kind"]](cfg, out)
    elapsed = time.perf_counter() - start
    files = [
        {"name": p.name, "sha256": _sha256(p), "bytes": p.stat().st_size}
        for p in sorted(out.iterdir())
        if p.is_file()
    ]
    manifest = RunManifest(cfg["kind"], config_hash(cfg), cfg["seed"], __version__, files, elapsed, _jsonable(summary))
    (out / "manifest.json").write_text(manifest.to_json())
    return manifest


def run(config_path, output=None):
    cfg = load_config(config_path)
    out = Path(output) if output is not None else resolve_output(cfg, config_path)
    return run_config(cfg, out)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    return obj
