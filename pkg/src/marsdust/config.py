"""Run configuration: defaults < TOML file < MARSDUST_* environment < command-line flags.

Nested keys are addressed in the environment with a double underscore,
e.g. ``MARSDUST_AUTOENCODER__EPOCHS=5``; values are parsed as TOML literals
and fall back to plain strings.
"""

from __future__ import annotations

import copy
import json
import os
import sys
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

ENV_PREFIX = "MARSDUST_"

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "data_root": "",
    "manifest": "manifest.csv",
    "columns": {"path": "path", "label": "label", "split": "split"},
    "workers": 1,
    "classifier": {
        "model": "cnn",
        "epochs": 10,
        "batch_size": 32,
        "learning_rate": 3e-4,
        "transfer_weights": "imagenet",
        "allow_download": False,
        "svm_c": 1e4,
        "svm_components": 0,  # 0 = elbow point
        "max_train": 0,  # 0 = whole split
    },
    "noise": {
        "kind": "dust",
        "level": 0.5,
        "low_high_ratio": 0.5,
        "bands": "default",
        "fraction": 0.1,
    },
    "autoencoder": {
        "variant": "up128_z256",
        "base_filters": 32,
        "epochs": 100,
        "batch_size": 64,
        "learning_rate": 3e-4,
        "loss": "bce",
        "noise_level": 0.5,
        "pretrain_epochs": 0,
        "max_train": 0,
    },
    "pix2pix": {
        "epochs": 10,
        "base_filters": 64,
        "lambda_l1": 100.0,
        "generator_lr": 2e-4,
        "discriminator_lr": 2e-4,
        "noise_level": 0.5,
        "max_train": 0,
    },
    "sweep": {"levels": [0.1, 0.3, 0.5, 0.7]},
}


class ConfigError(ValueError):
    """Unknown key or wrongly typed value in a config source."""


def _coerce(value: Any, default: Any, where: str) -> Any:
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("1", "true", "yes", "0", "false", "no"):
            return value.lower() in ("1", "true", "yes")
        raise ConfigError(f"{where}: expected a boolean, got {value!r}")
    if isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, int) and isinstance(value, int) and not isinstance(value, bool):
        return value
    if isinstance(default, str) and isinstance(value, (str, int, float)):
        return str(value)
    if isinstance(default, list) and isinstance(value, list):
        return value
    if isinstance(default, dict) and isinstance(value, dict):
        return value
    raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")


def merge(base: dict, override: Mapping, where: str = "config") -> dict:
    """Recursively overlay ``override`` on ``base``, rejecting unknown keys."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in out:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if isinstance(out[key], dict) and key != "columns":
            if not isinstance(value, Mapping):
                raise ConfigError(f"{where}.{key}: expected a table")
            out[key] = merge(out[key], value, f"{where}.{key}")
        else:
            out[key] = _coerce(value, out[key], f"{where}.{key}")
    return out


def _parse_env_value(raw: str) -> Any:
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def env_overrides(environ: Mapping[str, str] | None = None) -> dict:
    """Collect MARSDUST_* variables that name known config keys; others are ignored."""
    environ = os.environ if environ is None else environ
    found: dict = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        path = [p.lower() for p in name[len(ENV_PREFIX) :].split("__")]
        node = DEFAULTS
        for part in path[:-1]:
            node = node.get(part) if isinstance(node, dict) else None
            if not isinstance(node, dict):
                break
        if not isinstance(node, dict) or path[-1] not in node or isinstance(node[path[-1]], dict):
            continue
        target = found
        for part in path[:-1]:
            target = target.setdefault(part, {})
        target[path[-1]] = _parse_env_value(raw)
    return found


def load_file(path: str | Path) -> dict:
    """Read a TOML config, or the ``config`` table of a previous run's config_resolved.json."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file {p} does not exist")
    if p.suffix == ".json":
        data = json.loads(p.read_text())
        return data.get("config", data)
    with open(p, "rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from exc


def resolve(config_path: str | Path | None = None, flags: Mapping | None = None, environ: Mapping[str, str] | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if config_path is not None:
        cfg = merge(cfg, load_file(config_path), str(config_path))
    cfg = merge(cfg, env_overrides(environ), "environment")
    if flags:
        cfg = merge(cfg, flags, "command line")
    return cfg


def manifest_path(cfg: Mapping) -> Path:
    p = Path(cfg["manifest"])
    if not p.is_absolute() and cfg.get("data_root"):
        p = Path(cfg["data_root"]) / p
    return p


def write_resolved(out_dir: str | Path, command: str, args: Mapping, cfg: Mapping) -> Path:
    """Write config_resolved.json: the subcommand, its arguments and the merged config."""
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in args.items()}, "config": cfg}
    path = d / "config_resolved.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path
