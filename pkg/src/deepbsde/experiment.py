"""JSON experiment configs: validation, reference resolution, runs, sweeps and
result files.

A config is a nested mapping merged over :data:`DEFAULTS`::

    {
      "name": "hjb",
      "problem": {"id": "hjb_lqg", "params": {"d": 100, "lambda": 1.0}},
      "grid": {"steps": 20},
      "net": {"hidden_layers": 2, "style": "plain", ...},
      "train": {"iterations": 2000, "lr_schedule": [[0, 0.01]], "runs": 5, ...},
      "reference": {"kind": "auto", "samples": null, "seed": 2024},
      "oracle": {"kind": "auto", "samples": null, "seed": 2024},
      "sweep": {"problem.params.lambda": [1, 10, 20]},
      "output": {"dir": "results"}
    }

``net.output_scale = null`` means ``1/d``; ``net.hidden_width = null`` means ``d + 10``.
"""

from __future__ import annotations

import copy
import csv
import io
import itertools
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import oracles, solver
from .net import NetConfig
from .numerics import make_rng
from .problems import PROBLEMS, ProblemSpec, make_problem
from .references import Provenance, ReferenceValue

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CSV_HEADER = ("iteration", "loss", "u0", "relative_error", "elapsed_s")
OUTPUT_ENV = "DEEPBSDE_OUTPUT_DIR"

DEFAULTS: dict[str, Any] = {
    "name": "experiment",
    "problem": {"id": None, "params": {}},
    "grid": {"steps": 20},
    "net": {
        "hidden_layers": 2,
        "hidden_width": None,
        "style": "plain",
        "bn_epsilon": 1e-6,
        "bn_momentum": 0.99,
        "input_bn": True,
        "init": "xavier_uniform",
        "skip_scale": 1.0,
        "output_scale": None,
    },
    "train": {
        "batch_size": 64,
        "iterations": 2000,
        "lr_schedule": [[0, 0.01]],
        "seed": 0,
        "runs": 5,
        "eval_every": 100,
        "u0_bracket": None,
        "record_time": True,
    },
    "reference": {"kind": "auto", "samples": None, "seed": 2024, "steps": 100},
    "oracle": {"kind": "auto", "samples": None, "seed": 2024, "steps": 100},
    "sweep": {},
    "output": {"dir": "results"},
}

DEFAULT_SAMPLES = {"hjb_mc": 10_000_000, "linear_fk": 1_000_000}


class ConfigError(ValueError):
    """Invalid experiment configuration (exit code 1)."""


# ---------------------------------------------------------------- configs


def bundled_configs() -> list[str]:
    root = resources.files("deepbsde") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def _deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "sweep":
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(source) -> dict:
    """Read a config from a mapping, a file path, or a bundled config name."""
    if isinstance(source, dict):
        raw = source
    else:
        path = Path(source)
        if path.is_file():
            text = path.read_text()
        else:
            name = str(source)[:-5] if str(source).endswith(".json") else str(source)
            ref = resources.files("deepbsde") / "configs" / f"{name}.json"
            if not ref.is_file():
                raise ConfigError(f"no config file {source!r} and no bundled config of that "
                                  f"name; bundled: {', '.join(bundled_configs())}")
            text = ref.read_text()
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - set(DEFAULTS) - {"schema_version", "description"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return _deep_merge(DEFAULTS, raw)


def set_path(config: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = config
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"{dotted}: {k!r} is not a config section")
        node = node[k]
    if keys[0] != "problem" and keys[-1] not in node:
        # problem params are free-form; everything else must already exist
        raise ConfigError(f"unknown config key {dotted!r}")
    node[keys[-1]] = value


def apply_overrides(config: dict, assignments) -> dict:
    """``["train.iterations=100", ...]``; values are parsed as JSON when possible."""
    config = copy.deepcopy(config)
    for item in assignments or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        set_path(config, key.strip(), value)
    return config


def build_spec(config: dict) -> ProblemSpec:
    pid = config["problem"]["id"]
    if pid not in PROBLEMS:
        raise ConfigError(f"unknown problem_id {pid!r}; registered: {', '.join(sorted(PROBLEMS))}")
    try:
        return make_problem(pid, **config["problem"]["params"])
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {pid}: {exc}") from None


def build_grid(config: dict, spec: ProblemSpec) -> solver.TimeGrid:
    return solver.TimeGrid(int(config["grid"]["steps"]), spec.horizon)


def build_net_config(config: dict, spec: ProblemSpec) -> NetConfig:
    kw = {k: v for k, v in config["net"].items() if v is not None}
    return solver.default_net_config(spec, **kw)


def build_train_config(config: dict) -> solver.TrainConfig:
    t = dict(config["train"])
    t["lr_schedule"] = tuple(tuple(x) for x in t["lr_schedule"])
    if t["u0_bracket"] is not None:
        t["u0_bracket"] = tuple(t["u0_bracket"])
    return solver.TrainConfig(**t)


def validate(config: dict) -> None:
    """Build every piece once so configuration errors surface before any work."""
    try:
        spec = build_spec(config)
        build_grid(config, spec)
        build_net_config(config, spec)
        build_train_config(config)
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from None
    for section in ("reference", "oracle"):
        kind = config[section]["kind"]
        if kind not in ("auto", "hjb_mc", "linear_fk", "problem", "stored", "none"):
            raise ConfigError(f"{section}.kind {kind!r} is not recognised")


# ---------------------------------------------------------------- references

_ORACLE_CACHE: dict[str, oracles.McEstimate] = {}


def _oracle_kind(spec: ProblemSpec, kind: str) -> str:
    if kind != "auto":
        return kind
    if spec.problem_id == "hjb_lqg":
        return "hjb_mc"
    if spec.problem_id == "bs_linear":
        return "linear_fk"
    return "problem"


def compute_oracle(spec: ProblemSpec, settings: dict):
    """Evaluate the configured oracle; returns ``McEstimate`` or ``ReferenceValue`` or None."""
    kind = _oracle_kind(spec, settings["kind"])
    if kind == "none":
        return None
    if kind == "problem":
        return spec.reference
    if kind == "stored":
        try:
            return oracles.stored_reference(spec.problem_id)
        except KeyError as exc:
            raise ConfigError(exc.args[0]) from None
    samples = int(settings["samples"] or DEFAULT_SAMPLES[kind])
    seed = int(settings["seed"])
    key = json.dumps([kind, spec.problem_id, spec.params, samples, seed, settings.get("steps")],
                     sort_keys=True, default=str)
    if key in _ORACLE_CACHE:
        return _ORACLE_CACHE[key]
    rng = make_rng(seed, 0)
    if kind == "hjb_mc":
        if spec.problem_id != "hjb_lqg":
            raise ConfigError("the hjb_mc oracle only applies to hjb_lqg")
        est = oracles.hjb_reference(spec.dim, spec.params["lam"], spec.horizon, spec.terminal,
                                    spec.start_point, samples, rng, symmetric_g=True)
    elif kind == "linear_fk":
        try:
            est = oracles.linear_fk_reference(spec, samples, rng, steps=int(settings["steps"]))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    else:
        raise ConfigError(f"unknown oracle kind {kind!r}")
    _ORACLE_CACHE[key] = est
    return est


def as_reference(value) -> Optional[ReferenceValue]:
    if value is None or isinstance(value, ReferenceValue):
        return value
    return value.as_reference(f"Monte Carlo, {value.samples} samples, seed {value.seed}")


def oracle_json(value) -> dict:
    if isinstance(value, oracles.McEstimate):
        return value.to_dict()
    out = {"value": value.value, "std_error": value.std_error, "samples": None, "seed": None,
           "provenance": value.provenance.value}
    if value.citation:
        out["citation"] = value.citation
    return out


# ---------------------------------------------------------------- runs


@dataclass
class ExperimentResult:
    name: str
    config: dict
    spec: ProblemSpec
    summary: solver.RunSummary
    reference: Optional[ReferenceValue]
    params: list

    def summary_json(self) -> dict:
        runs = [{
            "seed": seed,
            "final_u0": recs[-1].u0,
            "final_loss": recs[-1].loss,
            "final_relative_error": _nan_to_none(recs[-1].relative_error),
            "runtime_s": recs[-1].elapsed_s,
        } for seed, recs in zip(self.summary.seeds, self.summary.runs)]
        stats = {k: _nan_to_none(v) for k, v in self.summary.stats().items()}
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "problem_id": self.spec.problem_id,
            "problem_params": self.spec.params,
            "reference": None if self.reference is None else self.reference.to_dict(),
            "stats": stats,
            "runs": runs,
            "config": self.config,
        }


def _nan_to_none(v):
    return None if isinstance(v, float) and math.isnan(v) else v


def _train_one(config: dict, seed: int, reference: Optional[ReferenceValue]):
    spec = build_spec(config)
    if reference is not None:
        spec = spec.with_reference(reference)
    grid = build_grid(config, spec)

    def progress(rec):
        log.info("%s seed %d it %d loss %.4g u0 %.6g rel %.3g", config["name"], seed,
                 rec.iteration, rec.loss, rec.u0, rec.relative_error)

    return solver.train_run(spec, grid, build_net_config(config, spec),
                            build_train_config(config), seed, callback=progress)


def run_experiment(config: dict, jobs: int = 1) -> ExperimentResult:
    """Train ``train.runs`` seeds of one configuration."""
    validate(config)
    spec = build_spec(config)
    reference = as_reference(compute_oracle(spec, config["reference"]))
    if reference is not None:
        spec = spec.with_reference(reference)
    tc = build_train_config(config)
    seeds = [tc.seed + r for r in range(tc.runs)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_train_one, [config] * len(seeds), seeds,
                                    [reference] * len(seeds)))
    else:
        results = [_train_one(config, s, reference) for s in seeds]
    summary = solver.RunSummary(reference=None if reference is None else reference.value)
    for seed, (_, records) in zip(seeds, results):
        summary.runs.append(records)
        summary.seeds.append(seed)
    return ExperimentResult(config["name"], config, spec, summary, reference,
                            [p for p, _ in results])


def sweep_points(config: dict) -> list[dict[str, Any]]:
    grid = config["sweep"]
    if not grid:
        return [{}]
    for key, values in grid.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep entry {key!r} must be a non-empty list")
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def point_label(point: dict) -> str:
    return "_".join(f"{k.rsplit('.', 1)[-1]}={v}" for k, v in point.items())


def expand_sweep(config: dict) -> list[tuple[dict, dict]]:
    """``[(point, config_for_point), ...]`` with the sweep section removed."""
    out = []
    for point in sweep_points(config):
        cfg = copy.deepcopy(config)
        cfg["sweep"] = {}
        for key, value in point.items():
            set_path(cfg, key, value)
        if point:
            cfg["name"] = f"{config['name']}_{point_label(point)}"
        validate(cfg)
        out.append((point, cfg))
    return out


# ---------------------------------------------------------------- files


def output_dir(config: dict, override: Optional[str] = None) -> Path:
    base = override or os.environ.get(OUTPUT_ENV) or config["output"]["dir"]
    return Path(base)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def records_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow([r.iteration, _fmt(r.loss), _fmt(r.u0), _fmt(r.relative_error),
                    _fmt(r.elapsed_s)])
    return buf.getvalue()


def write_result(result: ExperimentResult, out: Path) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for seed, records in zip(result.summary.seeds, result.summary.runs):
        path = out / f"{result.name}_seed{seed}.csv"
        path.write_text(records_csv(records))
        written.append(path)
    path = out / f"{result.name}_summary.json"
    path.write_text(json.dumps(result.summary_json(), indent=2, sort_keys=True) + "\n")
    written.append(path)
    return written


SWEEP_COLUMNS = ("u0_mean", "u0_std", "relative_error_mean", "relative_error_std",
                 "reference", "runtime_mean_s")


def sweep_csv(rows: list[tuple[dict, ExperimentResult]]) -> str:
    keys = list(rows[0][0]) if rows else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys + list(SWEEP_COLUMNS))
    for point, res in rows:
        stats = dict(res.summary.stats())
        stats["reference"] = None if res.reference is None else res.reference.value
        w.writerow([_fmt(point[k]) for k in keys] + [_fmt(stats[c]) for c in SWEEP_COLUMNS])
    return buf.getvalue()


def read_records_csv(path) -> np.ndarray:
    """Load a per-run CSV as a structured array."""
    return np.genfromtxt(path, delimiter=",", names=True, dtype=float)
