"""Experiment configuration: JSON defaults, overrides and validation.

A configuration is a nested dict.  Files and overrides may only set keys
that exist in :data:`DEFAULTS`; anything else is rejected with the dotted
key in the message.  Overrides come from ``--set a.b=value`` (value parsed
as JSON, falling back to a plain string) and from environment variables
``SPMAP__A__B=value``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

from .errors import ConfigError

ENV_PREFIX = "SPMAP__"

DEFAULTS: dict = {
    "road": {
        "waypoints": None,
        "length": 3218.7,
        "spacing": 5.0,
        "M": 40,
        "degree": 6,
        "closed": False,
    },
    "kernel": {"D": 3.0, "sigma": 1.0},
    "grid": {"s_min": 0.0, "s_max": 600.0, "e_max": 6.0, "spacing_s": 2.0, "spacing_e": 1.0},
    "camera": {
        "fx": 800.0, "fy": 800.0, "cx": 640.0, "cy": 360.0, "width": 1280, "height": 720,
        "x": 0.0, "y": 0.0, "z": 1.5, "roll": 0.0, "pitch": 10.0, "yaw": 0.0, "plane_z": 0.0,
    },
    "simulator": {
        "seeds": [0, 1, 2, 3, 4, 5, 6, 7, 8, 9],
        "speed": 15.0,
        "distance": 600.0,
        "semantic_rate": 20.0,
        "property_rate": 40.0,
        "pixels_per_frame": 64,
        "near": 4.0,
        "far": 90.0,
        "lateral": {"kind": "sine", "amplitude": 5.0, "wavelength": 150.0},
        "classes": {
            "mu": [0.55, 0.9, 0.35],
            "lam": [25.0, 25.0, 25.0],
            "alpha": [50.0, 50.0, 50.0],
            "noise_sd": [0.02, 0.02, 0.02],
        },
        "field": {
            "gravel_e": 4.5,
            "water_intensity": 0.08,
            "length_s": 30.0,
            "length_e": 2.0,
            "concentration": 50.0,
        },
    },
    "prior": {"magnitude": 0.9, "a": [1.0, 5.0, 1.0], "var_cap": 1.0},
    "baselines": {
        "kf": {"q": 1e-5, "r": 0.0004, "variance0": 1.0},
        "gp": {"span": 100.0, "cap": 400, "starts": 3, "maxiter": 200},
    },
    "eval": {
        "kl_every": 10.0,
        "horizon": {
            "s0": 300.0,
            "n": 80,
            "amplitude": 3.5,
            "scenario": "patch",
            "patch_offset": 40.0,
            "patch_radius": 6.0,
            "constant_value": 0.7,
        },
    },
    "output": {"dir": "out"},
}

# keys whose values may be zero or negative
_SIGNED = {
    "grid.s_min", "camera.x", "camera.y", "camera.roll", "camera.pitch", "camera.yaw", "camera.plane_z",
    "camera.cx", "camera.cy", "simulator.lateral.amplitude", "prior.magnitude",
    "simulator.field.water_intensity", "eval.horizon.patch_offset", "eval.horizon.patch_radius",
    "eval.horizon.amplitude",
}
# keys allowed to be null
_NULLABLE = {"road.waypoints"}


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def _walk(tree: dict, prefix: str = ""):
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            yield from _walk(v, key + ".")
        else:
            yield key, v


def merge(base: dict, update: dict, prefix: str = "") -> dict:
    """Recursively merge ``update`` into a copy of ``base``; unknown keys raise."""
    out = copy.deepcopy(base)
    for k, v in update.items():
        key = f"{prefix}{k}"
        if k not in out:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {key!r} must be an object")
            out[k] = merge(out[k], v, key + ".")
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_key(cfg: dict, dotted: str, value) -> dict:
    parts = dotted.split(".")
    update: dict = {}
    node = update
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return merge(cfg, update)


def _resolve_env_key(name: str) -> str:
    node, parts = DEFAULTS, []
    for raw in name[len(ENV_PREFIX):].split("__"):
        match = next((k for k in (node if isinstance(node, dict) else {}) if k.lower() == raw.lower()), raw.lower())
        parts.append(match)
        node = node.get(match) if isinstance(node, dict) else None
    return ".".join(parts)


def apply_overrides(cfg: dict, sets=(), environ=None) -> dict:
    environ = os.environ if environ is None else environ
    for name in sorted(environ):
        if name.startswith(ENV_PREFIX):
            dotted = _resolve_env_key(name)
            cfg = set_key(cfg, dotted, _parse_value(environ[name]))
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        cfg = set_key(cfg, key.strip(), _parse_value(text))
    return cfg


def validate(cfg: dict) -> dict:
    """Check that every default key is present with a value of a sensible type and sign."""
    present = dict(_walk(cfg))
    for key, default in _walk(DEFAULTS):
        if key not in present:
            raise ConfigError(f"missing config key {key!r}")
        v = present[key]
        if v is None:
            if key in _NULLABLE:
                continue
            raise ConfigError(f"config key {key!r} must not be null")
        if isinstance(default, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"config key {key!r} must be a boolean")
        elif isinstance(default, (int, float)) and default is not None:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"config key {key!r} must be a number")
            if isinstance(default, int) and not isinstance(default, bool) and not float(v).is_integer():
                raise ConfigError(f"config key {key!r} must be an integer")
            if key not in _SIGNED and not v > 0:
                raise ConfigError(f"config key {key!r} must be positive")
        elif isinstance(default, list):
            if not isinstance(v, list) or not v:
                raise ConfigError(f"config key {key!r} must be a non-empty list")
            if key != "simulator.seeds" and any(not (isinstance(x, (int, float)) and x > 0) for x in v):
                raise ConfigError(f"config key {key!r} must hold positive numbers")
        elif isinstance(default, str) and not isinstance(v, str):
            raise ConfigError(f"config key {key!r} must be a string")
    if not 0 <= cfg["prior"]["magnitude"] < 1:
        raise ConfigError("config key 'prior.magnitude' must lie in [0, 1)")
    if not 0 <= cfg["simulator"]["field"]["water_intensity"] < 1:
        raise ConfigError("config key 'simulator.field.water_intensity' must lie in [0, 1)")
    if cfg["simulator"]["lateral"]["kind"] not in ("zero", "constant", "sine"):
        raise ConfigError("config key 'simulator.lateral.kind' must be zero, constant or sine")
    if cfg["eval"]["horizon"]["scenario"] not in ("patch", "constant"):
        raise ConfigError("config key 'eval.horizon.scenario' must be patch or constant")
    if cfg["grid"]["s_max"] <= cfg["grid"]["s_min"]:
        raise ConfigError("config key 'grid.s_max' must exceed 'grid.s_min'")
    K = len(cfg["simulator"]["classes"]["mu"])
    for name in ("lam", "alpha", "noise_sd"):
        if len(cfg["simulator"]["classes"][name]) != K:
            raise ConfigError(f"config key 'simulator.classes.{name}' must have {K} entries")
    if len(cfg["prior"]["a"]) != K:
        raise ConfigError(f"config key 'prior.a' must have {K} entries")
    return cfg


def load_config(path=None, sets=(), environ=None) -> dict:
    cfg = default_config()
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        cfg = merge(cfg, doc)
    return validate(apply_overrides(cfg, sets, environ))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()
