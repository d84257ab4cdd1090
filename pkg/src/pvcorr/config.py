"""Run configuration: training settings plus paths, loaded from JSON and overridable per key.

Precedence, highest first: command-line flag, config file, ``PVCORR_SEED``
(seed only), built-in default.
"""

from __future__ import annotations

import json
import os
from dataclasses import fields
from pathlib import Path

from .training import TrainConfig

PATH_KEYS = ("data", "out", "frozen", "log")
SEED_ENV = "PVCORR_SEED"


class ConfigError(ValueError):
    pass


def train_fields():
    return {f.name: f for f in fields(TrainConfig)}


def parse_bool(text):
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _coerce(name, value):
    f = train_fields()[name]
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    try:
        if kind == "bool":
            return parse_bool(value)
        if kind == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        if kind == "float":
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        return str(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name}: expected {kind}, got {value!r}") from e


def read_config_file(path):
    p = Path(path)
    try:
        data = json.loads(p.read_text())
    except OSError as e:
        raise ConfigError(f"{p}: {e.strerror or e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON at line {e.lineno} ({e.msg})") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: expected a JSON object of key/value pairs")
    return data


def resolve(file_values=None, cli_values=None, env=None):
    """Merge the sources and validate.

    Returns ``(train_config, paths)``; unknown keys and invalid values raise
    :class:`ConfigError`.
    """
    env = os.environ if env is None else env
    known = set(train_fields()) | set(PATH_KEYS)
    merged = {}
    if env.get(SEED_ENV, "").strip():
        merged["seed"] = env[SEED_ENV]
    for source in (file_values or {}, cli_values or {}):
        unknown = sorted(set(source) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        merged.update({k: v for k, v in source.items() if v is not None})
    paths = {k: merged.pop(k, None) for k in PATH_KEYS}
    values = {k: _coerce(k, v) for k, v in merged.items()}
    try:
        cfg = TrainConfig(**values)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return cfg, paths


def dump(cfg, path):
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def load_model_config(path):
    """Training config stored beside a checkpoint."""
    return resolve(read_config_file(path), env={})[0]
