"""Run configuration: defaults, file loading, validation and hashing."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import fields
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .rl import PpoConfig

OUTPUT_DIR_ENV = "RLTAB_OUTPUT_DIR"

_PPO_KEYS = [f.name for f in fields(PpoConfig) if not f.name.startswith("disc_")]

DEFAULTS = {
    "seed": 0,
    "paths": {
        "input": None,          # None -> bundled toy dataset
        "schema": None,
        "rules": None,
        "output_dir": "rltab-out",
    },
    "data": {"holdout_fraction": 0.2},
    "discovery": {"delta_thresh": 0.3, "k": 10},
    "policy": {
        "embed_dim": 64,
        "hidden": 128,
        "value_hidden": 64,
        "generation_temperature": 0.8,
        "mle_epochs": 100,
        "mle_lr": 2e-4,
        "mle_batch_size": 16,
        "patience": 10,
        "val_fraction": 0.1,
    },
    "ppo": {k: getattr(PpoConfig(), k) for k in _PPO_KEYS},
    "discriminators": {
        "mu": {"token": 1.0, "sent": 1.0, "feat": 1.0, "row": 1.0},
        "lam": {"token": 0.25, "sent": 0.25, "feat": 0.25, "row": 0.25},
        "steps": 4,
        "lr": 1e-4,
        "batch_size": 64,
        "embed_dim": 64,
        "rnn_hidden": 128,
        "head": [64, 64],
    },
    "generate": {"count": 1000},
    "evaluation": {
        "bins": 20,
        "eps_priv": "auto",
        "folds": 5,
        "faith_weights": {"fact": 0.25, "align": 0.25, "integ": 0.25, "track": 0.25},
        "baselines": {},
    },
}

# Sections whose keys are free-form (names chosen by the user).
_OPEN_SECTIONS = {("evaluation", "baselines")}


def _merge(base: dict, override: dict, where: tuple = ()) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = where + (key,)
        if key not in base and where not in _OPEN_SECTIONS:
            raise ConfigError(f"unknown config key {'.'.join(path)!r}")
        if isinstance(base.get(key), dict) and path not in _OPEN_SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {'.'.join(path)!r} must be a table")
            out[key] = _merge(base[key], value, path)
        else:
            out[key] = value
    return out


def _read(path: Path) -> dict:
    try:
        text = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        if path.suffix.lower() == ".toml":
            try:
                import tomllib
            except ImportError:  # Python < 3.11
                import tomli as tomllib
            return tomllib.loads(text.decode("utf-8"))
        return json.loads(text)
    except Exception as exc:
        raise ConfigError(f"{path}: cannot parse config ({exc})") from None


def _check(cfg: dict):
    def positive(section, key, kind=(int, float)):
        v = cfg[section][key]
        if isinstance(v, bool) or not isinstance(v, kind) or v <= 0:
            raise ConfigError(f"{section}.{key} must be a positive number, got {v!r}")

    if isinstance(cfg["seed"], bool) or not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    if not 0 < cfg["data"]["holdout_fraction"] < 1:
        raise ConfigError("data.holdout_fraction must lie in (0, 1)")
    for key in ("embed_dim", "hidden", "value_hidden", "mle_batch_size"):
        positive("policy", key, int)
    for key in ("mle_lr", "generation_temperature"):
        positive("policy", key)
    for key in ("minibatch_size", "rollouts_per_epoch", "update_passes"):
        positive("ppo", key, int)
    if not isinstance(cfg["ppo"]["epochs"], int) or cfg["ppo"]["epochs"] < 0:
        raise ConfigError("ppo.epochs must be a non-negative integer")
    if not isinstance(cfg["discovery"]["k"], int) or cfg["discovery"]["k"] < 0:
        raise ConfigError("discovery.k must be a non-negative integer")
    eps = cfg["evaluation"]["eps_priv"]
    if eps != "auto" and (isinstance(eps, bool) or not isinstance(eps, (int, float)) or eps < 0):
        raise ConfigError("evaluation.eps_priv must be 'auto' or a non-negative number")
    w = cfg["evaluation"]["faith_weights"]
    if abs(sum(w.values()) - 1.0) > 1e-9:
        raise ConfigError("evaluation.faith_weights must sum to 1")
    try:
        ppo_config(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None, overrides: Optional[dict] = None) -> dict:
    """Materialize a config from defaults, an optional file and overrides.

    Relative paths in the file are resolved against the file's directory.
    The output directory can be overridden by the ``RLTAB_OUTPUT_DIR``
    environment variable.
    """
    cfg = copy.deepcopy(DEFAULTS)
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        cfg = _merge(cfg, _read(path))
        base = path.resolve().parent
    if overrides:
        cfg = _merge(cfg, overrides)
    for key, value in cfg["paths"].items():
        if value is not None and not Path(value).is_absolute():
            cfg["paths"][key] = str(base / value)
    env = os.environ.get(OUTPUT_DIR_ENV)
    if env:
        cfg["paths"]["output_dir"] = str(Path(env).resolve())
    _check(cfg)
    return cfg


def config_hash(cfg: dict) -> str:
    """Stable digest of the materialized config (output location excluded)."""
    material = copy.deepcopy(cfg)
    material["paths"].pop("output_dir", None)
    blob = json.dumps(material, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def ppo_config(cfg: dict) -> PpoConfig:
    d = cfg["discriminators"]
    return PpoConfig(**cfg["ppo"], disc_steps=d["steps"], disc_batch_size=d["batch_size"], disc_lr=d["lr"])
