"""Command-line experiment harness.

Each command reads one JSON config (a path or inline JSON), validates it
against a schema that rejects unknown fields, runs the corresponding library
operation and writes a JSON run report.  Exit codes: 0 success, 2 invalid
config or arguments, 3 estimation/assembly failure, 4 budget exceeded.
"""

from __future__ import annotations

import argparse
import copy
import itertools
import json
import math
import platform
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from . import gaussmix as gm
from .empirics import Dataset, draw_samples, model_hash
from .errors import (
    BudgetExceeded,
    DomainError,
    EstimationFailed,
    InfeasibleBox,
    InvalidArgument,
    PolymomError,
    RangeError,
)
from .estimator import (
    DataSampler,
    EstimationConfig,
    GridSearchEstimator,
    ModelSampler,
    OracleEstimator,
    ParamBox,
    estimate,
    gaussian_mixture_template,
    gm_model,
    leaf_template,
)
from .polyfam import enumerate_indices, model_from_dict, model_moment
from .reducer import ReductionConfig, detect_identifiability, learn

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_FAILED, EXIT_BUDGET = 0, 1, 2, 3, 4

COMMANDS = ("moments", "sample", "estimate", "radius", "project", "reduce", "detect", "bench", "sweep")


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# schemas
# ---------------------------------------------------------------------------

_INT = {"type": "integer"}
_NUM = {"type": "number"}
_OBJ = {"type": "object"}
_SEED = {"type": "integer", "minimum": 0, "maximum": 2**64 - 1}
_WORKERS = {"type": "integer", "minimum": 1}
_NUMS = {"type": "array", "items": _NUM, "minItems": 1}


def _strict(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_GM = _strict({"means": {"type": "array"}, "covariances": {"type": "array"}, "weights": _NUMS}, ["means", "covariances", "weights"])
_SOURCE = {"model": _OBJ, "gm": _GM, "data": {"type": "string"}}
_ESTIMATOR = {
    "oneOf": [
        _strict({"kind": {"const": "oracle"}, "eta": {"type": "number", "minimum": 0}, "seed": _SEED}, ["kind"]),
        _strict(
            {
                "kind": {"const": "grid"},
                "mean_bounds": _NUMS,
                "var_bounds": _NUMS,
                "cov_bounds": _NUMS,
                "weight_bounds": _NUMS,
                "grid_step": _NUM,
                "t": _NUM,
                "N": _INT,
                "refine_levels": _INT,
                "keep_top": _INT,
                "sample_cap": _INT,
                "C": _NUM,
                "delta": _NUM,
            },
            ["kind"],
        ),
    ]
}
_COMMON = {"seed": _SEED, "workers": _WORKERS}

SCHEMAS = {
    "moments": _strict({**_COMMON, "model": _OBJ, "N": {"type": "integer", "minimum": 1}}, ["model", "N"]),
    "sample": _strict(
        {**_COMMON, "model": _OBJ, "M": {"type": "integer", "minimum": 1}, "csv": {"type": "string"}}, ["model", "M"]
    ),
    "estimate": _strict(
        {
            **_COMMON,
            **_SOURCE,
            "template": _strict(
                {
                    "kind": {"enum": ["leaf", "gaussian_mixture"]},
                    "family": {"type": "string"},
                    "fixed": {"type": "object", "additionalProperties": _NUM},
                    "d": {"type": "integer", "minimum": 1},
                    "k": {"type": "integer", "minimum": 1},
                },
                ["kind"],
            ),
            "box": _strict({"lower": _NUMS, "upper": _NUMS}, ["lower", "upper"]),
            "estimation": _OBJ,
            "truth": _GM,
        },
        ["template", "box"],
    ),
    "radius": _strict({**_COMMON, "gm": _GM}, ["gm"]),
    "project": _strict(
        {**_COMMON, "gm": _GM, "plane": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1}},
        ["gm", "plane"],
    ),
    "reduce": _strict({**_COMMON, "gm": _GM, "data": {"type": "string"}, "k": _INT, "reduction": _OBJ, "estimator": _ESTIMATOR}, ["estimator"]),
    "detect": _strict(
        {**_COMMON, "gm": _GM, "data": {"type": "string"}, "k": _INT, "eps": {"type": "number", "exclusiveMinimum": 0}, "reduction": _OBJ, "estimator": _ESTIMATOR},
        ["eps", "estimator"],
    ),
    "bench": _strict(
        {**_COMMON, "command": {"enum": [c for c in COMMANDS if c not in ("bench", "sweep")]}, "config": _OBJ, "repeats": {"type": "integer", "minimum": 1}},
        ["command", "config"],
    ),
    "sweep": _strict(
        {
            **_COMMON,
            "command": {"enum": [c for c in COMMANDS if c not in ("bench", "sweep")]},
            "base": _OBJ,
            "grid": {"type": "object", "additionalProperties": {"type": "array", "minItems": 1}, "minProperties": 1},
            "parallel": {"type": "integer", "minimum": 1},
        },
        ["command", "base", "grid"],
    ),
}


def load_config(source: str) -> dict:
    """Parse ``source`` as inline JSON when it looks like an object, else as a path."""
    text = source
    if not source.lstrip().startswith("{"):
        try:
            text = Path(source).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {source!r}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON config: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return doc


def validate(command: str, doc: dict) -> None:
    try:
        jsonschema.validate(doc, SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        where = "/".join(map(str, exc.absolute_path)) or "<root>"
        raise ConfigError(f"invalid {command} config at {where}: {exc.message}") from None
    if command in ("estimate", "reduce", "detect"):
        sources = [s for s in ("model", "gm", "data") if s in doc]
        if len(sources) != 1:
            raise ConfigError(f"{command} config needs exactly one of model / gm / data, got {sources or 'none'}")
        if command != "estimate" and "model" in sources:
            raise ConfigError(f"{command} works on Gaussian mixtures; use gm or data")
        if command != "estimate" and "data" in sources and "k" not in doc:
            raise ConfigError(f"{command} on a dataset needs k")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _sampler(doc, workers):
    if "model" in doc:
        return ModelSampler(model_from_dict(doc["model"]), workers)
    if "gm" in doc:
        return ModelSampler(gm_model(gm.GMParams.from_dict(doc["gm"])), workers)
    return DataSampler(Dataset.from_csv(doc["data"]).rows)


def _low_dim(doc, theta, workers):
    spec = dict(doc)
    kind = spec.pop("kind")
    if kind == "oracle":
        if theta is None:
            raise InvalidArgument("the oracle estimator needs the true parameters (gm)")
        return OracleEstimator(theta, **spec)
    for key in ("mean_bounds", "var_bounds", "cov_bounds", "weight_bounds"):
        if key in spec:
            if len(spec[key]) != 2:
                raise InvalidArgument(f"{key} needs two numbers")
            spec[key] = tuple(spec[key])
    return GridSearchEstimator(**spec, workers=workers)


def _reduction_inputs(doc, seed, workers):
    theta = gm.GMParams.from_dict(doc["gm"]) if "gm" in doc else None
    n, k = (theta.n, theta.k) if theta is not None else (None, doc["k"])
    if "k" in doc and theta is not None and doc["k"] != theta.k:
        raise InvalidArgument(f"k={doc['k']} disagrees with the {theta.k}-component gm")
    est = _low_dim(doc["estimator"], theta, workers)
    rcfg = ReductionConfig.from_dict({**doc.get("reduction", {}), "seed": seed, "workers": workers}, estimator=est)
    sampler = _sampler(doc, workers)
    return theta, sampler, sampler.dim if n is None else n, k, rcfg


def cmd_moments(doc, seed, workers):
    model = model_from_dict(doc["model"])
    idx = enumerate_indices(model.dim, doc["N"])
    return {"indices": [list(i) for i in idx], "moments": [model_moment(model, i) for i in idx]}, {}


def cmd_sample(doc, seed, workers):
    model = model_from_dict(doc["model"])
    data = draw_samples(model, doc["M"], seed, workers=workers)
    out = {"M": data.M, "l": data.l, "model_hash": model_hash(model), "column_means": data.rows.mean(axis=0).tolist()}
    if "csv" in doc:
        data.to_csv(doc["csv"])
        out["csv"] = doc["csv"]
    return out, {}


def cmd_estimate(doc, seed, workers):
    t = doc["template"]
    if t["kind"] == "leaf":
        if "family" not in t:
            raise InvalidArgument("leaf template needs a family")
        template = leaf_template(t["family"], t.get("fixed"))
    else:
        if "d" not in t or "k" not in t:
            raise InvalidArgument("gaussian_mixture template needs d and k")
        template = gaussian_mixture_template(t["d"], t["k"])
    box = ParamBox(tuple(doc["box"]["lower"]), tuple(doc["box"]["upper"]), template.feasible)
    if box.m != template.m:
        raise InvalidArgument(f"box has {box.m} coordinates, template {template.name} has {template.m}")
    cfg = EstimationConfig.from_dict({**doc.get("estimation", {}), "seed": seed, "workers": workers})
    est = estimate(_sampler(doc, workers), template, box, cfg)
    results = est.to_dict()
    diagnostics = results.pop("diagnostics")
    if "truth" in doc:
        if t["kind"] != "gaussian_mixture":
            raise InvalidArgument("truth comparison needs a gaussian_mixture template")
        truth = gm.GMParams.from_dict(doc["truth"])
        found = gm.from_template_vector(np.asarray(est.params), t["d"], t["k"])
        results["matched_distance"] = gm.matched_distance(truth, found)[0]
    return results, diagnostics


def cmd_radius(doc, seed, workers):
    return {"radius": gm.radius(gm.GMParams.from_dict(doc["gm"]))}, {}


def cmd_project(doc, seed, workers):
    theta = gm.GMParams.from_dict(doc["gm"])
    plane = gm.CoordinatePlane(tuple(doc["plane"]))
    proj = gm.project(theta, plane)
    return {"plane": list(plane.indices), "projected": proj.to_dict(), "radius": gm.radius(proj)}, {}


def cmd_reduce(doc, seed, workers):
    theta, sampler, n, k, rcfg = _reduction_inputs(doc, seed, workers)
    found, report = learn(sampler, n, k, rcfg)
    timings = report.pop("timings")
    results = {"estimate": found.to_dict()}
    if theta is not None:
        results["matched_distance"] = gm.matched_distance(theta, found)[0]
    return results, {**report, "stage_timings": timings}


def cmd_detect(doc, seed, workers):
    _, sampler, n, k, rcfg = _reduction_inputs(doc, seed, workers)
    det = detect_identifiability(sampler, n, k, doc["eps"], rcfg)
    return {
        "verdict": det.verdict,
        "r_star": det.r_star,
        "cutoff": det.cutoff,
        "plane": list(det.plane),
    }, {"planes_evaluated": det.planes_evaluated}


def cmd_bench(doc, seed, workers):
    inner = doc["command"]
    config = doc["config"]
    validate(inner, config)
    times, results = [], None
    for _ in range(doc.get("repeats", 3)):
        t0 = time.perf_counter()
        res, _ = HANDLERS[inner](config, config.get("seed", seed), config.get("workers", workers))
        times.append(time.perf_counter() - t0)
        results = res if results is None else results
    return {"command": inner, "results": results, "repeats": len(times)}, {
        "seconds": times,
        "median_seconds": float(np.median(times)),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }


HANDLERS = {
    "moments": cmd_moments,
    "sample": cmd_sample,
    "estimate": cmd_estimate,
    "radius": cmd_radius,
    "project": cmd_project,
    "reduce": cmd_reduce,
    "detect": cmd_detect,
    "bench": cmd_bench,
}


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


def _set_path(doc, dotted, value):
    keys = dotted.split(".")
    node = doc
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"sweep path {dotted!r} crosses a non-object")
    node[keys[-1]] = value


def sweep_cells(doc: dict) -> list[dict]:
    """Cartesian product of ``grid`` applied to ``base``, in grid-key order."""
    keys = list(doc["grid"])
    cells = []
    for combo in itertools.product(*(doc["grid"][k] for k in keys)):
        cell = copy.deepcopy(doc["base"])
        for key, value in zip(keys, combo):
            _set_path(cell, key, value)
        cells.append(cell)
    return cells


def _run_cell(command, cell, seed, workers):
    cell_seed = cell.get("seed", seed)
    cell_workers = cell.get("workers", workers)
    echo = {**cell, "seed": cell_seed, "workers": cell_workers}
    try:
        validate(command, cell)
        results, _ = HANDLERS[command](cell, cell_seed, cell_workers)
        return {"status": "ok", "config": echo, "results": _jsonable(results)}
    except Exception as exc:  # a bad cell never stops the sweep
        code, kind = exit_code_for(exc)
        return {"status": "error", "config": echo, "error": {"type": kind, "exit_code": code, "message": str(exc)}}


def run_sweep(doc, seed, workers) -> list[dict]:
    command = doc["command"]
    cells = sweep_cells(doc)
    par = doc.get("parallel", 1)
    if par > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(par) as pool:
            lines = list(pool.map(lambda c: _run_cell(command, c, seed, workers), cells))
    else:
        lines = [_run_cell(command, c, seed, workers) for c in cells]
    return [{"cell": i, "command": command, **line} for i, line in enumerate(lines)]


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


def exit_code_for(exc: BaseException) -> tuple[int, str]:
    if isinstance(exc, BudgetExceeded):
        return EXIT_BUDGET, "budget-exceeded"
    if isinstance(exc, (EstimationFailed, InfeasibleBox, RangeError)):
        return EXIT_FAILED, type(exc).__name__
    if isinstance(exc, (ConfigError, InvalidArgument, DomainError, jsonschema.ValidationError)):
        return EXIT_CONFIG, "invalid-config"
    if isinstance(exc, PolymomError):
        return EXIT_FAILED, type(exc).__name__
    return EXIT_INTERNAL, "internal-error"


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return repr(x)
    return x


def _write(text: str, out) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def run(command: str, source: str, seed=None, out=None, workers=None) -> tuple[dict | None, int]:
    """Run one command; returns (report or None, exit code).

    On an invalid config nothing is written.
    """
    t0 = time.perf_counter()
    try:
        doc = load_config(source)
        validate(command, doc)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return None, EXIT_CONFIG
    seed = doc.get("seed", 0) if seed is None else seed
    workers = doc.get("workers", 1) if workers is None else workers
    echo = {**doc, "seed": seed, "workers": workers}

    if command == "sweep":
        lines = run_sweep(doc, seed, workers)
        _write("".join(json.dumps(line, sort_keys=True) + "\n" for line in lines), out)
        failed = sum(1 for line in lines if line["status"] != "ok")
        print(f"sweep: {len(lines)} cells, {failed} failed", file=sys.stderr)
        return {"task": "sweep", "lines": lines}, EXIT_OK

    report = {"task": command, "config": echo, "seed": seed, "version": __version__}
    try:
        results, diagnostics = HANDLERS[command](doc, seed, workers)
        report.update(status="ok", results=results, diagnostics=diagnostics)
        code = EXIT_OK
    except Exception as exc:
        code, kind = exit_code_for(exc)
        if code == EXIT_INTERNAL:
            raise
        print(f"error [{getattr(exc, 'stage', command)}]: {exc}", file=sys.stderr)
        if code == EXIT_CONFIG:
            return None, code
        report.update(status="error", error={"type": kind, "stage": getattr(exc, "stage", None), "message": str(exc)})
    report["timings"] = {"wall_clock_seconds": time.perf_counter() - t0}
    report = _jsonable(report)
    _write(json.dumps(report, indent=2, sort_keys=True) + "\n", out)
    return report, code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polymom", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="config file path or inline JSON object")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--out", default=None, help="report path (JSON, or JSON lines for sweep); stdout if omitted")
        p.add_argument("--workers", type=int, default=None, help="thread count; results do not depend on it")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be a 64-bit unsigned integer", file=sys.stderr)
        return EXIT_CONFIG
    if args.workers is not None and args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    _, code = run(args.command, args.config, seed=args.seed, out=args.out, workers=args.workers)
    return code


if __name__ == "__main__":
    sys.exit(main())
