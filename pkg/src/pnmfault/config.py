"""Run configuration: documented defaults, YAML files and environment overrides.

Precedence, lowest first: built-in defaults, the YAML file, ``PNMFAULT_*``
environment variables, command-line flags. An environment variable names a
dotted path with ``__`` as separator, e.g. ``PNMFAULT_TRAINING__N_FEATURES=3``;
its value is parsed as a YAML scalar.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigError
from .model import METRICS

ENV_PREFIX = "PNMFAULT_"

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "jobs": 1,
    "ingest": {
        "max_gap_hours": 24,
        "pnm_columns": {},
        "ticket_columns": {},
    },
    "tickets": {
        "dispatch_actions": ["Dispatch"],
        "description_keywords": ["Data Down", "Noisy Line", "Slow Speed"],
    },
    "features": {"metrics": list(METRICS)},
    "training": {
        "n_features": 5,
        "grid_steps": 200,
        "max_abnormal_share": 0.5,
        "directions": {},
    },
    "detection": {
        "x": 8,
        "y": 12,
        "auto_window": True,
        "y_range": [1, 12],
        "coverage_floor": 0.15,
        "cadence_hours": 4,
    },
    "clustering": {
        "features": ["snr", "tx_power"],
        "grid": {"start": 0.5, "stop": 0.99, "step": 0.01},
        "min_group": 2,
        "combine": "any",
        "margin_points": None,
        "permutations": 0,
    },
    "evaluation": {
        "pdf_bin_hours": 12,
        "mtr_threshold_db": 18.0,
    },
    "synth": {},
}

# Sections whose keys are free-form (not checked against the defaults).
_OPEN = {("ingest", "pnm_columns"), ("ingest", "ticket_columns"), ("training", "directions"), ("synth",)}


def _merge(base: dict, override: Mapping, path: tuple = ()) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        here = path + (k,)
        if k not in base:
            raise ConfigError(f"unknown config key {'.'.join(here)!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, Mapping):
                raise ConfigError(f"config key {'.'.join(here)!r} must be a mapping")
            # free-form sections are replaced wholesale, the rest merged key by key
            out[k] = copy.deepcopy(dict(v)) if here in _OPEN else _merge(base[k], v, here)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _nest(dotted: list[str], value: Any) -> dict:
    node: Any = value
    for k in reversed(dotted):
        node = {k: node}
    return node


def env_overrides(environ: Mapping[str, str] | None = None) -> dict:
    environ = os.environ if environ is None else environ
    out: dict = {}
    for name in sorted(environ):
        if not name.startswith(ENV_PREFIX):
            continue
        path = [p.lower() for p in name[len(ENV_PREFIX):].split("__") if p]
        if not path:
            continue
        try:
            value = yaml.safe_load(environ[name])
        except yaml.YAMLError as exc:
            raise ConfigError(f"{name}: {exc}") from exc
        out = _deep_update(out, _nest(path, value))
    return out


def _deep_update(a: dict, b: Mapping) -> dict:
    out = dict(a)
    for k, v in b.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _deep_update(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | Path | None = None, overrides: Mapping | None = None,
                environ: Mapping[str, str] | None = None) -> dict:
    """Resolved configuration as a plain nested dict."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            doc = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(doc, Mapping):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = _merge(cfg, doc)
    cfg = _merge(cfg, env_overrides(environ))
    if overrides:
        cfg = _merge(cfg, overrides)
    validate(cfg)
    return cfg


def validate(cfg: Mapping) -> None:
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    unknown = set(cfg["features"]["metrics"]) - set(METRICS)
    need(not unknown, f"unknown metrics {sorted(unknown)}")
    t, d, c = cfg["training"], cfg["detection"], cfg["clustering"]
    need(isinstance(t["n_features"], int) and t["n_features"] >= 1, "training.n_features must be >= 1")
    need(isinstance(t["grid_steps"], int) and t["grid_steps"] >= 2, "training.grid_steps must be >= 2")
    need(0 < t["max_abnormal_share"] <= 1, "training.max_abnormal_share must be in (0, 1]")
    need(1 <= d["x"] <= d["y"], "detection needs 1 <= x <= y")
    lo, hi = d["y_range"]
    need(1 <= lo <= hi, "detection.y_range must be [lo, hi] with 1 <= lo <= hi")
    need(0 <= d["coverage_floor"] <= 1, "detection.coverage_floor must be in [0, 1]")
    need(d["cadence_hours"] > 0, "detection.cadence_hours must be positive")
    g = c["grid"]
    need(-1 <= g["start"] <= g["stop"] <= 1 and g["step"] > 0, "clustering.grid must lie in [-1, 1]")
    need(c["combine"] in ("any", "all"), "clustering.combine must be 'any' or 'all'")
    need(c["min_group"] >= 2, "clustering.min_group must be >= 2")
    need(isinstance(cfg["jobs"], int) and cfg["jobs"] >= 1, "jobs must be >= 1")


def similarity_grid(cfg: Mapping) -> list[float]:
    g = cfg["clustering"]["grid"]
    n = int(round((g["stop"] - g["start"]) / g["step"])) + 1
    return [round(g["start"] + k * g["step"], 10) for k in range(n)]


def config_hash(cfg: Mapping) -> str:
    """Stable digest of the resolved configuration; ``jobs`` is excluded as it never changes results."""
    doc = {k: v for k, v in cfg.items() if k != "jobs"}
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def dump_config(cfg: Mapping) -> str:
    return yaml.safe_dump(dict(cfg), sort_keys=False, default_flow_style=False)
