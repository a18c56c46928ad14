"""Hierarchical run configuration shared by every CLI verb."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import yaml

from ..datagen import ConfigError, OODKind

DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "data": {
        "num_classes": 4,
        "image_size": 16,
        "channels": 3,
        "train_per_class": 2000,
        "test_per_class": 500,
        "noise_sigma": 0.05,
        "eval_id_samples": 500,
        "ood_samples": 500,
    },
    "model": {"block_channels": [16, 32, 64]},
    "train": {"epochs": 15, "lr": 0.05, "momentum": 0.9, "batch_size": 64},
    "inversion": {
        "iterations": 500,
        "batch_size": 32,
        "samples_per_class": 64,
        "lr": 0.05,
        "bn_loss_weight": 1.0,
        "tv_weight": 0.0,
        "l2_weight": 0.0,
        "min_consistency": 0.8,
    },
    "calibration": {"delta_y_guard": 1.0e-6},
    "detector": {
        "threshold": "auto",
        "energy_temperature": 1.0,
        "odin_temperature": 1000.0,
        "odin_epsilon": 0.0014,
    },
    # selects what is reported; excluded from the run-directory hash
    "eval": {
        "ood_sets": [k.value for k in OODKind],
        "methods": ["c2ir", "msp", "energy", "odin"],
        "ablation_modes": ["mgi", "penultimate_only", "uniform_mean", "random_weights",
                           "bn_stats_reference"],
        "seeds": [0, 1, 2],
    },
}

METHODS = ("c2ir", "msp", "energy", "odin")
ABLATION_MODES = ("mgi", "penultimate_only", "uniform_mean", "random_weights",
                  "bn_stats_reference")


def _merge(base: Dict[str, Any], update: Dict[str, Any], path: str = "") -> None:
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            _merge(base[key], value, where + ".")
        else:
            base[key] = value


def set_key(cfg: Dict[str, Any], dotted: str, value: Any) -> None:
    node = cfg
    parts = dotted.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[p]
    if parts[-1] not in node or isinstance(node[parts[-1]], dict):
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


def parse_override(text: str) -> tuple[str, Any]:
    """``a.b=value`` with ``value`` parsed as YAML (so numbers and lists work)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def load_config(path: Optional[str | Path] = None, overrides: Iterable[str] = ()) -> Dict[str, Any]:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            user = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"config {path} must be a mapping")
        _merge(cfg, user)
    for item in overrides:
        set_key(cfg, *parse_override(item))
    validate(cfg)
    return cfg


def validate(cfg: Dict[str, Any]) -> None:
    ev = cfg["eval"]
    bad = [m for m in ev["methods"] if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown methods {bad}; choose from {list(METHODS)}")
    bad = [m for m in ev["ablation_modes"] if m not in ABLATION_MODES]
    if bad:
        raise ConfigError(f"unknown ablation modes {bad}; choose from {list(ABLATION_MODES)}")
    kinds = {k.value for k in OODKind}
    bad = [s for s in ev["ood_sets"] if s not in kinds]
    if bad:
        raise ConfigError(f"unknown OOD sets {bad}; choose from {sorted(kinds)}")
    if cfg["data"]["eval_id_samples"] > cfg["data"]["num_classes"] * cfg["data"]["test_per_class"]:
        raise ConfigError("eval_id_samples exceeds the ID test set size")


def config_hash(cfg: Dict[str, Any]) -> str:
    """Digest of everything that affects persisted pipeline outputs."""
    payload = {k: v for k, v in cfg.items() if k != "eval"}
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def with_seed(cfg: Dict[str, Any], seed: int) -> Dict[str, Any]:
    out = copy.deepcopy(cfg)
    out["seed"] = int(seed)
    return out
