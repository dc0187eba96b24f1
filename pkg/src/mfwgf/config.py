"""Experiment configuration: JSON schema validation and object assembly.

Configs are plain JSON.  Validation is strict — unknown keys anywhere in
the tree are rejected with their dotted path — because silently ignored
typos in experiment configs are how irreproducible figures happen.
Command-line flags override file values after validation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Optional

import numpy as np

from mfwgf.engine import EngineConfig
from mfwgf.errors import ConfigError
from mfwgf.gmm import GmmConfig, GmmParams, equilateral_centers, gmm_generate, gmm_model
from mfwgf.model import Dataset, LatentModelSpec, load_dataset
from mfwgf.mor import MorConfig, mor_generate, mor_model

__all__ = [
    "ExperimentConfig",
    "load_config",
    "validate_config",
    "build_model",
    "build_dataset",
    "build_engine_config",
]


# ---------------------------------------------------------------------------
# Schema
# ---------------------------------------------------------------------------

_SCHEMA: dict[str, Any] = {
    "model": {
        "kind": str,
        "K": int,
        "d": int,
        "beta": (int, float),
        "weights": (list, type(None)),
        "prior": str,
        "g0": (int, float),
        "sigma2": (int, float),
        "weight_sigma2": (int, float),
        "theta_star": (dict, list, type(None)),
        "center_scale": (int, float),
    },
    "data": {
        "generate": {"n": int, "seed": int},
        "load": {"path": str},
    },
    "engine": {
        "scheme": str,
        "step_size": (int, float),
        "step_decay": (int, float),
        "iterations": int,
        "particles": int,
        "seed": int,
        "snapshot_every": int,
        "kde_bandwidth": (int, float, str),
        "record_metrics": list,
    },
    "init": {
        "kind": str,
        "noise_scale": (int, float),
        "restarts": int,
        "seed": int,
        "point": list,
    },
    "metrics": {
        "reference": str,
        "extension_factor": (int, float),
        "error_budget": (int, type(None)),
    },
    "sweep": {
        "parameter": str,
        "values": list,
    },
    "gibbs": {
        "iterations": int,
        "burn_in": (int, type(None)),
        "seed": int,
        "mh_step": (int, float),
        "contour_bins": int,
    },
    "flowlab": {
        "preset": str,
        "potential": str,
        "quartic_coeff": (int, float),
        "grid": {"lo": (int, float), "hi": (int, float), "cells": int},
        "rho0": {"mean": (int, float), "std": (int, float)},
        "pairs": list,
        "taus": list,
        "tau": (int, float),
        "steps": int,
        "horizons": list,
        "exact_score": bool,
        "levels": int,
        "trim": (int, float),
    },
    "output": str,
}

_MODEL_KINDS = ("gmm", "mor")
_INIT_KINDS = ("kmeans", "point", "prior")
_REFERENCES = ("fixed_point", "true_param", "gibbs", "none")
_SWEEP_PARAMS = ("snr", "n", "separation")
_FLOWLAB_PRESETS = ("orders", "contraction", "cumulative")


def _check_block(block: Any, schema: dict, path: str) -> None:
    if not isinstance(block, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    for key, val in block.items():
        where = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(f"{where}: unknown key")
        rule = schema[key]
        if isinstance(rule, dict):
            # Either a nested fixed schema, or a one-of union keyed by
            # the member name (the "data" block).
            _check_block(val, rule, where)
        else:
            if isinstance(val, bool) and bool not in (
                rule if isinstance(rule, tuple) else (rule,)
            ):
                raise ConfigError(f"{where}: expected {rule}, got bool")
            if not isinstance(val, rule):
                raise ConfigError(
                    f"{where}: expected {rule}, got {type(val).__name__}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated raw config tree (plain dicts; builders assemble objects)."""

    raw: dict

    def block(self, name: str, default=None):
        return self.raw.get(name, default)


def validate_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    for key in raw:
        if key not in _SCHEMA:
            raise ConfigError(f"{key}: unknown key")
    for key, block in raw.items():
        if key == "output":
            if not isinstance(block, str):
                raise ConfigError("output: expected a path string")
            continue
        if key == "data":
            if not isinstance(block, dict) or len(block) != 1 or \
                    next(iter(block)) not in ("generate", "load"):
                raise ConfigError(
                    "data: expected exactly one of {generate, load}")
            sub = next(iter(block))
            _check_block(block[sub], _SCHEMA["data"][sub], f"data.{sub}")
            continue
        _check_block(block, _SCHEMA[key], key)

    model = raw.get("model")
    if model is not None and model.get("kind") not in _MODEL_KINDS:
        raise ConfigError(f"model.kind: expected one of {_MODEL_KINDS}")
    init = raw.get("init")
    if init is not None and init.get("kind", "kmeans") not in _INIT_KINDS:
        raise ConfigError(f"init.kind: expected one of {_INIT_KINDS}")
    metrics = raw.get("metrics")
    if metrics is not None and \
            metrics.get("reference", "none") not in _REFERENCES:
        raise ConfigError(f"metrics.reference: expected one of {_REFERENCES}")
    sweep = raw.get("sweep")
    if sweep is not None:
        if sweep.get("parameter") not in _SWEEP_PARAMS:
            raise ConfigError(f"sweep.parameter: expected one of {_SWEEP_PARAMS}")
        if not sweep.get("values"):
            raise ConfigError("sweep.values: must be a nonempty list")
    flow = raw.get("flowlab")
    if flow is not None and flow.get("preset") not in _FLOWLAB_PRESETS:
        raise ConfigError(f"flowlab.preset: expected one of {_FLOWLAB_PRESETS}")
    return ExperimentConfig(raw=raw)


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return validate_config(raw)


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def _gmm_theta_star(block: dict, cfg: GmmConfig) -> Optional[GmmParams]:
    spec = block.get("theta_star")
    if spec is None and "center_scale" in block:
        if cfg.d != 2 or cfg.K != 3:
            raise ConfigError("model.center_scale: the equilateral layout "
                              "needs K=3, d=2")
        return GmmParams(equilateral_centers(block["center_scale"]))
    if spec is None:
        return None
    if isinstance(spec, list):
        spec = {"centers": spec}
    centers = np.asarray(spec.get("centers"), dtype=np.float64)
    if centers.shape != (cfg.K, cfg.d):
        raise ConfigError(f"model.theta_star.centers: expected shape "
                          f"({cfg.K}, {cfg.d})")
    logits = spec.get("logits")
    if cfg.unknown_weights:
        if logits is None and "weights" in spec:
            w = np.asarray(spec["weights"], dtype=np.float64)
            logits = np.log(w) - np.log(w).mean()
        if logits is None:
            raise ConfigError("model.theta_star: unknown-weights mode needs "
                              "logits (or weights) in theta_star")
        logits = np.asarray(logits, dtype=np.float64)
    elif logits is not None:
        raise ConfigError("model.theta_star.logits: not allowed with known "
                          "weights")
    unknown = {k for k in spec} - {"centers", "logits", "weights"}
    if unknown:
        raise ConfigError(f"model.theta_star: unknown key(s) {sorted(unknown)}")
    return GmmParams(centers, logits if cfg.unknown_weights else None)


def build_model(block: dict):
    """(LatentModelSpec, model config, theta_star) from a model block."""
    if block is None:
        raise ConfigError("config needs a model block for this command")
    kind = block.get("kind")
    if kind == "gmm":
        weights = block.get("weights", "absent")
        cfg = GmmConfig(
            K=block.get("K", 3),
            d=block.get("d", 2),
            beta=float(block.get("beta", 1.0)),
            weights=None if weights in ("absent", None) else tuple(weights),
            prior=block.get("prior", "repulsive"),
            g0=float(block.get("g0", 1.0)),
            sigma2=float(block.get("sigma2", 25.0)),
            weight_sigma2=float(block.get("weight_sigma2", 4.0)),
        )
        theta = _gmm_theta_star(block, cfg)
        return gmm_model(cfg, theta), cfg, theta
    if kind == "mor":
        cfg = MorConfig(
            d=block.get("d", 2),
            beta=float(block.get("beta", 1.0)),
            sigma2=float(block.get("sigma2", 25.0)),
        )
        spec = block.get("theta_star")
        theta = None if spec is None else np.asarray(spec, dtype=np.float64)
        if theta is not None and theta.shape != (cfg.d,):
            raise ConfigError(f"model.theta_star: expected {cfg.d} numbers")
        for key in ("K", "weights", "prior", "g0", "weight_sigma2",
                    "center_scale"):
            if key in block:
                raise ConfigError(f"model.{key}: not a mor parameter")
        return mor_model(cfg, theta), cfg, theta
    raise ConfigError(f"model.kind: expected one of {_MODEL_KINDS}")


def build_dataset(data_block: dict, model_cfg, theta_star,
                  seed_override: Optional[int] = None) -> Dataset:
    if data_block is None:
        raise ConfigError("config needs a data block for this command")
    if "load" in data_block:
        return load_dataset(data_block["load"]["path"])
    gen = data_block["generate"]
    n = gen["n"]
    seed = seed_override if seed_override is not None else gen.get("seed", 0)
    if theta_star is None:
        raise ConfigError("data.generate needs model.theta_star")
    if isinstance(model_cfg, GmmConfig):
        return gmm_generate(model_cfg, theta_star, n, seed)
    if isinstance(model_cfg, MorConfig):
        return mor_generate(model_cfg, theta_star, n, seed)
    raise ConfigError("data.generate: unsupported model config")


def build_engine_config(block: dict, seed_override: Optional[int] = None,
                        **overrides) -> EngineConfig:
    block = dict(block or {})
    block.update({k: v for k, v in overrides.items() if v is not None})
    if seed_override is not None:
        block["seed"] = seed_override
    record = block.get("record_metrics")
    if record is not None:
        block["record_metrics"] = tuple(record)
    try:
        return EngineConfig(**block)
    except TypeError as exc:
        raise ConfigError(f"engine: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"engine: {exc}") from exc
