"""Layered run configuration: built-in defaults <- TOML file <- CLI flags.

Unknown keys are rejected with a suggestion, type mismatches name the
full key path, and the resolved configuration is echoed into the output
directory as resolved.json so every artifact is reconstructible.
"""

from __future__ import annotations

import copy
import difflib
import json
import os
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class ConfigError(Exception):
    """Invalid configuration file or flag values."""


# The paper-table values are the built-in defaults; sweep sizes default
# to the desk scale used for CI runs.
DEFAULTS = {
    "seed": 0,
    "out": "runs/latest",
    "simulation": {
        "system": "covid",
        "dt": 1.0,
        "n_obs": 31,
        "n_horizon": 10,
        "n_cycles": 5,
        "drug_coupling": "z4-substitution",
        "train_size": 1024,
        "val_size": 128,
        "test_size": 128,
    },
    "policy": {
        "alpha": 2.0,
        "d_w0": 0.5,
        "dose_scale": 1.0,
    },
    "training": {
        "model": "crn-lite",
        "ensemble": 1,
        "hidden": 64,
        "dropout": 0.1,
        "revin": True,
        "epochs": 120,
        "batch_size": 64,
        "lr": 0.01,
        "hsic_weight": 0.0,
        "patience": 12,
        "weight_decay": 0.0001,
    },
    "uncertainty": {
        "method": "mc-dropout",
        "n_passes": 8,
    },
    "selection": {
        "lambda": 0.0,
        "mse_weight": 0.02,
        "constraint": "soft",
        "alpha": 0.01,
        "beta": 4.0,
        "range_low": -1.0,
        "range_high": 1.0,
        "steps": 50,
        "lr": 0.1,
        "target": [],  # empty -> per-system default trajectory
    },
    "sweep": {
        "lambdas": [0.0, 0.25, 4.0],
        "replicates": 3,
        "constraints": ["soft"],
        "methods": ["mc-dropout"],
        "split": "test",
        "workers": 1,
    },
}

# The paper's full uncertainty-weight list, available via config.
PAPER_LAMBDAS = [0.0, 1e-5, 1e-4, 1e-3, 1e-2, 0.0625, 0.125, 0.25, 0.5,
                 1.0, 2.0, 4.0, 8.0, 16.0]


def _suggest(key: str, candidates) -> str:
    close = difflib.get_close_matches(key, candidates, n=1)
    return f", did you mean {close[0]!r}?" if close else ""


def _merge(base: dict, override: dict, path: str = "") -> None:
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown key {where!r}{_suggest(key, base)}")
        current = base[key]
        if isinstance(current, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected a section, got {type(value).__name__}")
            _merge(current, value, where)
            continue
        if isinstance(current, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}: expected bool, got {type(value).__name__}")
        elif isinstance(current, float):
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{where}: expected number, got {type(value).__name__}")
            value = float(value)
        elif isinstance(current, int):
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{where}: expected int, got {type(value).__name__}")
        elif isinstance(current, str):
            if not isinstance(value, str):
                raise ConfigError(f"{where}: expected string, got {type(value).__name__}")
        elif isinstance(current, list):
            if not isinstance(value, list):
                raise ConfigError(f"{where}: expected list, got {type(value).__name__}")
        base[key] = value


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Resolve the run configuration.

    Layering: built-in defaults, then the TOML file (if given), then
    flag overrides. CTSEL_SEED in the environment trumps everything for
    the master seed.
    """
    resolved = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            with open(p, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from exc
        _merge(resolved, data)
    if overrides:
        _merge(resolved, overrides)
    env_seed = os.environ.get("CTSEL_SEED")
    if env_seed is not None:
        try:
            resolved["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"CTSEL_SEED must be an integer, got {env_seed!r}") from exc
    _validate(resolved)
    return resolved


def _validate(cfg: dict) -> None:
    sim = cfg["simulation"]
    if sim["system"] not in ("cvs", "covid"):
        raise ConfigError(f"simulation.system must be cvs or covid, got {sim['system']!r}")
    if cfg["selection"]["lambda"] < 0:
        raise ConfigError("selection.lambda must be >= 0")
    if cfg["policy"]["alpha"] < 1:
        raise ConfigError("policy.alpha must be >= 1")
    if cfg["training"]["model"] not in ("crn-lite", "gnet-lite"):
        raise ConfigError(f"training.model must be crn-lite or gnet-lite")
    if cfg["uncertainty"]["method"] not in ("mc-dropout", "ensemble", "geometric"):
        raise ConfigError(f"unknown uncertainty.method {cfg['uncertainty']['method']!r}")
    if any(l < 0 for l in cfg["sweep"]["lambdas"]):
        raise ConfigError("sweep.lambdas must be >= 0")
    for kind in cfg["sweep"]["constraints"]:
        if kind not in ("range", "soft", "soft-paper", "tanh"):
            raise ConfigError(f"unknown sweep constraint {kind!r}")


def write_resolved(cfg: dict, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved.json"
    with open(path, "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
